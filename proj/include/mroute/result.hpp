#pragma once

#include <stdexcept>
#include <utility>
#include <variant>

namespace mroute {

/// Value-or-error return for operations whose failure is an expected outcome
/// (malformed tags, bad route directives). Contract violations throw instead.
template <typename T, typename E>
class Result {
public:
    Result(T value) : state_(std::in_place_index<0>, std::move(value)) {}
    Result(E error) : state_(std::in_place_index<1>, std::move(error)) {}

    bool ok() const noexcept { return state_.index() == 0; }
    explicit operator bool() const noexcept { return ok(); }

    const T& value() const& {
        if (!ok()) throw std::logic_error("Result::value() on error state");
        return std::get<0>(state_);
    }
    T& value() & {
        if (!ok()) throw std::logic_error("Result::value() on error state");
        return std::get<0>(state_);
    }
    T&& value() && {
        if (!ok()) throw std::logic_error("Result::value() on error state");
        return std::get<0>(std::move(state_));
    }

    const E& error() const& {
        if (ok()) throw std::logic_error("Result::error() on value state");
        return std::get<1>(state_);
    }

    const T* operator->() const { return &value(); }
    const T& operator*() const& { return value(); }

private:
    std::variant<T, E> state_;
};

}  // namespace mroute
