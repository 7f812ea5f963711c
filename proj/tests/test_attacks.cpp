#include "doctest.h"

#include "fda/attacks.hpp"
#include "fda/corpus.hpp"
#include "fda/error.hpp"
#include "fda/rng.hpp"

#include "support.hpp"

#include <algorithm>
#include <cmath>

using namespace fda;

namespace {

const Model& fixture_model() {
    static const Model m = [] {
        ModelConfig c;
        c.seed = 42;
        c.placement = parse_placement("L0-1,H0-3");
        return Model(c);
    }();
    return m;
}

const std::vector<CorpusItem>& fixture() {
    static const auto items = generate(42, 16);
    return items;
}

TokenSequence seq_of(std::size_t i) { return fixture()[i].tokens(fixture_model().config().max_len); }

AttackConfig config(AttackFamily family, Scalar eps, std::size_t steps) {
    AttackConfig c = AttackConfig::defaults(family);
    c.epsilon = eps;
    c.steps = steps;
    return c;
}

// Checks every iterate against the l-infinity ball and the pixel range with
// no tolerance.
struct BallCheck {
    const Tensor& x0;
    Scalar eps;
    std::size_t iterates = 0;
    std::size_t violations = 0;

    IterateHook hook() {
        return [this](const Tensor& x) {
            ++iterates;
            for (std::size_t i = 0; i < x.numel(); ++i) {
                const Scalar v = x.data()[i];
                if (!(std::abs(v - x0.data()[i]) <= eps) || v < 0 || v > 1) ++violations;
            }
        };
    }
};

} // namespace

TEST_CASE("epsilon parsing") {
    CHECK(parse_epsilon("2/255") == Scalar{2} / 255);
    CHECK(parse_epsilon(" 4/255 ") == Scalar{4} / 255);
    CHECK(parse_epsilon("0") == 0);
    CHECK(parse_epsilon("0.5") == Scalar{0.5});
    CHECK(format_epsilon(parse_epsilon("2/255")) == "2/255");
    CHECK(format_epsilon(0) == "0/255");
    CHECK(format_epsilon(0.3) == "0.3");
    for (const char* bad : {"", "x", "2/", "/255", "2/0", "1/2/3", "2/255x"}) {
        INFO(bad);
        support::expect_error(ErrorKind::ParseError, [&] { parse_epsilon(bad); });
    }
    support::expect_error(ErrorKind::RangeError, [] { parse_epsilon("-1/255"); });
}

TEST_CASE("family and mode names round trip") {
    for (auto f : {AttackFamily::PGD, AttackFamily::APGD, AttackFamily::MAPGD}) CHECK(parse_attack_family(to_string(f)) == f);
    CHECK(parse_attack_family("mapgd") == AttackFamily::MAPGD);
    for (auto m : {AttackMode::Targeted, AttackMode::Untargeted}) CHECK(parse_attack_mode(to_string(m)) == m);
    support::expect_error(ErrorKind::ParseError, [] { parse_attack_family("fgsm"); });
}

TEST_CASE("configuration defaults and validation") {
    CHECK(AttackConfig::defaults(AttackFamily::PGD).steps == 10);
    CHECK(AttackConfig::defaults(AttackFamily::APGD).steps == 100);
    CHECK(AttackConfig::defaults(AttackFamily::MAPGD).steps == 100);
    AttackConfig c;
    CHECK(c.pgd_step() == c.epsilon / 4);

    const auto& item = fixture()[0];
    AttackConfig zero = config(AttackFamily::PGD, Scalar{2} / 255, 0);
    support::expect_error(ErrorKind::ZeroSteps, [&] { pgd(fixture_model(), item.image, seq_of(0), std::nullopt, zero); });
    AttackConfig targeted = config(AttackFamily::APGD, Scalar{2} / 255, 5);
    targeted.mode = AttackMode::Targeted;
    support::expect_error(ErrorKind::MissingTarget, [&] { apgd(fixture_model(), item.image, seq_of(0), std::nullopt, targeted); });
    AttackConfig bad_rho = config(AttackFamily::APGD, Scalar{2} / 255, 5);
    bad_rho.rho = 1.5;
    support::expect_error(ErrorKind::InvalidConfig, [&] { apgd(fixture_model(), item.image, seq_of(0), std::nullopt, bad_rho); });
}

TEST_CASE("projection keeps the exact ball and range") {
    Rng rng(3);
    for (int t = 0; t < 20000; ++t) {
        const Scalar x0 = static_cast<Scalar>(rng.uniform01());
        const Scalar eps = static_cast<Scalar>(rng.index(9)) / 255;
        const Scalar v = static_cast<Scalar>(rng.uniform(-0.2, 1.2));
        const Scalar p = project(v, x0, eps);
        REQUIRE(std::abs(p - x0) <= eps);
        REQUIRE(p >= 0);
        REQUIRE(p <= 1);
    }
    CHECK(project(0.7, 0.5, 0.1) == doctest::Approx(0.6));
    CHECK(project(-1, 0.02, 0.1) == 0);
    CHECK(project(0.4, 0.5, 0) == Scalar{0.5});
}

TEST_CASE("zero radius returns the clean image bitwise") {
    const auto& dict = FunctionWordDictionary::builtin();
    for (auto family : {AttackFamily::PGD, AttackFamily::APGD, AttackFamily::MAPGD}) {
        INFO(to_string(family));
        for (std::size_t i = 0; i < 3; ++i) {
            AttackConfig c = config(family, 0, family == AttackFamily::PGD ? 10 : 20);
            auto r = run_attack(fixture_model(), fixture()[i].image, seq_of(i), std::nullopt, dict, c);
            CHECK(bitwise_equal(r.adv_image, fixture()[i].image));
        }
    }
}

TEST_CASE("every iterate stays inside the ball and the pixel range") {
    const auto& dict = FunctionWordDictionary::builtin();
    for (Scalar eps : {Scalar{2} / 255, Scalar{4} / 255}) {
        for (auto family : {AttackFamily::PGD, AttackFamily::APGD, AttackFamily::MAPGD}) {
            for (auto mode : {AttackMode::Untargeted, AttackMode::Targeted}) {
                INFO(to_string(family) << " " << to_string(mode) << " eps " << eps);
                const std::size_t i = 2;
                AttackConfig c = config(family, eps, family == AttackFamily::PGD ? 10 : 20);
                c.mode = mode;
                c.random_start = family == AttackFamily::PGD;
                std::optional<TokenSequence> target;
                if (mode == AttackMode::Targeted) target = seq_of(i + 1);
                BallCheck check{fixture()[i].image, eps};
                auto r = run_attack(fixture_model(), fixture()[i].image, seq_of(i), target, dict, c, check.hook());
                CHECK(check.iterates > c.steps);
                CHECK(check.violations == 0);
                for (std::size_t k = 0; k < r.adv_image.numel(); ++k) {
                    REQUIRE(std::abs(r.adv_image.data()[k] - fixture()[i].image.data()[k]) <= eps);
                }
            }
        }
    }
}

TEST_CASE("PGD never reports a best loss below the clean loss") {
    for (std::size_t i = 0; i < 4; ++i) {
        auto r = pgd(fixture_model(), fixture()[i].image, seq_of(i), std::nullopt, config(AttackFamily::PGD, Scalar{4} / 255, 10));
        REQUIRE(r.loss_trace.size() == 11);
        CHECK(r.best_loss >= r.loss_trace.front());
        CHECK(r.best_loss == *std::max_element(r.loss_trace.begin(), r.loss_trace.end()));
    }
}

TEST_CASE("APGD step sizes never increase") {
    auto r = apgd(fixture_model(), fixture()[5].image, seq_of(5), std::nullopt, config(AttackFamily::APGD, Scalar{4} / 255, 100));
    REQUIRE(r.step_sizes.size() == 100);
    CHECK(r.step_sizes.front() == Scalar{8} / 255);
    for (std::size_t k = 1; k < r.step_sizes.size(); ++k) CHECK(r.step_sizes[k] <= r.step_sizes[k - 1]);
    CHECK(r.best_loss >= r.loss_trace.front());
}

TEST_CASE("MAPGD equals APGD when the dictionary removes nothing") {
    const auto& item = fixture()[4];
    AttackConfig c = config(AttackFamily::APGD, Scalar{2} / 255, 30);
    c.seed = 17;
    auto reference = apgd(fixture_model(), item.image, seq_of(4), std::nullopt, c);
    auto empty = mapgd(fixture_model(), item.image, seq_of(4), std::nullopt, FunctionWordDictionary::empty(), c);
    CHECK(bitwise_equal(reference.adv_image, empty.adv_image));
    CHECK(reference.loss_trace == empty.loss_trace);

    const TokenSequence content = tokenize("red circle blue square", 16);
    auto a = apgd(fixture_model(), item.image, content, std::nullopt, c);
    auto b = mapgd(fixture_model(), item.image, content, std::nullopt, FunctionWordDictionary::builtin(), c);
    CHECK(bitwise_equal(a.adv_image, b.adv_image));

    // With the builtin dictionary the loss sees a shorter caption.
    const TokenSequence full = seq_of(4);
    const TokenSequence reduced = remove_dictionary_words(full, FunctionWordDictionary::builtin());
    std::size_t hits = 0;
    for (std::size_t k = 1; k < full.size(); ++k) hits += FunctionWordDictionary::builtin().contains(full.tokens[k]) ? 1 : 0;
    CHECK(hits > 0);
    CHECK(reduced.size() == full.size() - hits);
    auto masked = mapgd(fixture_model(), item.image, full, std::nullopt, FunctionWordDictionary::builtin(), c);
    CHECK(masked.loss_trace.front() == doctest::Approx(-fixture_model().score(item.image, reduced).item()));
}

TEST_CASE("APGD reaches at least the PGD loss on most trials") {
    std::size_t apgd_wins = 0, trials = 0;
    for (std::size_t t = 0; t < 50; ++t) {
        const std::size_t i = t % fixture().size();
        AttackConfig c = config(AttackFamily::PGD, t % 2 ? Scalar{4} / 255 : Scalar{2} / 255, 10);
        std::optional<TokenSequence> target;
        if (t % 4 >= 2) {
            c.mode = AttackMode::Targeted;
            target = seq_of((i + 1) % fixture().size());
        }
        auto p = pgd(fixture_model(), fixture()[i].image, seq_of(i), target, c);
        c.family = AttackFamily::APGD;
        c.steps = 100;
        auto a = apgd(fixture_model(), fixture()[i].image, seq_of(i), target, c);
        apgd_wins += a.best_loss >= p.best_loss ? 1 : 0;
        ++trials;
    }
    MESSAGE("APGD >= PGD in " << apgd_wins << " of " << trials << " trials");
    CHECK(apgd_wins >= 48);
}

TEST_CASE("circular-shift targets") {
    const auto a = tokenize("a red circle .", 16), b = tokenize("a blue square .", 16), c = tokenize("a green triangle .", 16);
    auto two = circular_shift_targets({a, b});
    CHECK(two == std::vector<TokenSequence>{b, a});
    auto three = circular_shift_targets({a, b, c});
    CHECK(three == std::vector<TokenSequence>{b, c, a});

    {
        support::CapturedWarnings w;
        auto dup = circular_shift_targets({a, a, b});
        CHECK(w.saw("DuplicateTarget"));
        CHECK(dup[0] == a);
    }
    {
        support::CapturedWarnings w;
        support::expect_error(ErrorKind::SingletonBatch, [&] { circular_shift_targets({a}); });
        CHECK(w.saw("SingletonBatch"));
    }
}
