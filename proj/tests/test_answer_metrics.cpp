#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "mroute/answer_metrics.hpp"
#include "mroute/text.hpp"
#include "support/oracles.hpp"

using namespace mroute;

namespace {

std::string random_answer(std::mt19937_64& rng) {
    static const std::vector<std::string> pieces = {"a",     "an",  "the",   "The",  "Cusco", "cuzco", "peru",
                                                    "Peru,", "x",   "lamina", "dura", "dura.", "King's", "  ",
                                                    "\t",    "-",   "A",     "THE",  "b",     "c",     "anthem",
                                                    "then",  "(1)", "1969",  "\n",   "a.b",   "they"};
    std::uniform_int_distribution<std::size_t> len(0, 6), pick(0, pieces.size() - 1);
    std::string s;
    const auto n = len(rng);
    for (std::size_t i = 0; i < n; ++i) {
        if (i > 0 && rng() % 3 != 0) s += ' ';
        s += pieces[pick(rng)];
    }
    return s;
}

}  // namespace

TEST(NormalizeAnswer, Examples) {
    EXPECT_EQ(normalize_answer("The Lamina Dura."), "lamina dura");
    EXPECT_EQ(normalize_answer(""), "");
    EXPECT_EQ(normalize_answer("Cusco, Peru"), "cusco peru");
    EXPECT_EQ(normalize_answer("  an   apple\tthe\npie "), "apple pie");
    EXPECT_EQ(normalize_answer("theatre"), "theatre");
}

TEST(NormalizeAnswer, Idempotent) {
    std::mt19937_64 rng(3);
    for (int i = 0; i < 500; ++i) {
        const auto s = random_answer(rng);
        EXPECT_EQ(normalize_answer(normalize_answer(s)), normalize_answer(s)) << s;
    }
}

TEST(ExactMatch, Examples) {
    const std::vector<std::string> ek{"Ek Haseena Thi Ek Deewana Tha"};
    EXPECT_EQ(exact_match("Ek Haseena Thi Ek Deewana Tha", ek), 1);
    const std::vector<std::string> cusco{"Cusco", "Cuzco", "Cusco, Peru", "Cuzco, Peru"};
    EXPECT_EQ(exact_match("cuzco", cusco), 1);
    const std::vector<std::string> two{"Cusco", "Cuzco"};
    EXPECT_EQ(exact_match("lima", two), 0);
}

TEST(ExactMatch, EmptyGoldsIsContractViolation) {
    const std::vector<std::string> none;
    EXPECT_THROW(exact_match("x", none), std::invalid_argument);
    EXPECT_THROW(f1_score("x", none), std::invalid_argument);
}

TEST(F1Score, Examples) {
    const std::vector<std::string> bc{"b c"};
    EXPECT_DOUBLE_EQ(f1_score("x b", bc), 0.5);
    const std::vector<std::string> g{"lamina dura"};
    EXPECT_DOUBLE_EQ(f1_score("lamina dura", g), 1.0);
    const std::vector<std::string> x{"x"};
    EXPECT_DOUBLE_EQ(f1_score("", x), 0.0);
    const std::vector<std::string> articles{"the"};
    EXPECT_DOUBLE_EQ(f1_score("a", articles), 1.0);
}

TEST(F1Score, ArticleTokensInTheSpecExampleAreDropped) {
    // With "a" an article, "a b" vs "b c" normalizes to "b" vs "b c": P=1, R=1/2.
    const std::vector<std::string> bc{"b c"};
    EXPECT_NEAR(f1_score("a b", bc), 2.0 / 3.0, 1e-12);
}

TEST(Metrics, InvariantToGoldOrderAndDuplicates) {
    std::mt19937_64 rng(11);
    for (int i = 0; i < 300; ++i) {
        const auto p = random_answer(rng);
        std::vector<std::string> golds{random_answer(rng), random_answer(rng), p};
        auto shuffled = golds;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        shuffled.push_back(shuffled.front());
        EXPECT_EQ(exact_match(p, golds), exact_match(p, shuffled));
        EXPECT_DOUBLE_EQ(f1_score(p, golds), f1_score(p, shuffled));
    }
}

TEST(Metrics, MatchesIndependentOracle) {
    std::mt19937_64 rng(2024);
    for (int i = 0; i < 1000; ++i) {
        const auto p = random_answer(rng);
        std::vector<std::string> golds{random_answer(rng)};
        if (rng() % 2) golds.push_back(random_answer(rng));
        ASSERT_EQ(normalize_answer(p), oracle::normalize(p)) << p;
        ASSERT_EQ(exact_match(p, golds), oracle::em(p, golds));
        ASSERT_NEAR(f1_score(p, golds), oracle::f1(p, golds), 1e-12);
        ASSERT_LE(exact_match(p, golds), f1_score(p, golds));
    }
}

TEST(Text, TokenHelpers) {
    EXPECT_EQ(text::count_tokens("  a b\tc\n"), 3u);
    EXPECT_EQ(text::take_tokens("a b c d", 2), "a b");
    EXPECT_EQ(text::take_tokens("a b ", 2), "a b ");
    EXPECT_EQ(text::take_tokens("a b c", 0), "");
    EXPECT_EQ(text::trim("  x y \n"), "x y");
    EXPECT_EQ(text::to_lower_ascii("LLaMA-3.1"), "llama-3.1");
}
