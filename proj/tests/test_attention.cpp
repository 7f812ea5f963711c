#include "doctest.h"

#include "gradcheck.hpp"
#include "oracles.hpp"

#include "fda/attention.hpp"
#include "fda/error.hpp"

#include <cmath>

using namespace fda;

namespace {

AttentionParams identity_params(std::size_t width) {
    std::vector<Scalar> eye(width * width, 0);
    for (std::size_t i = 0; i < width; ++i) eye[i * width + i] = 1;
    Linear id{Tensor({width, width}, eye), Tensor::zeros({width})};
    AttentionParams p;
    p.query = p.key = p.value = p.output = id;
    p.heads = 1;
    p.head_dim = width;
    return p;
}

std::vector<GateParam> fixed_gates(std::size_t n, Scalar g) { return std::vector<GateParam>(n, GateParam::fixed(g)); }

} // namespace

TEST_CASE("cross_attention") {
    SUBCASE("single token") {
        AttentionParams p = identity_params(1);
        Tensor out = cross_attention(Tensor::matrix({{0.3}}), Tensor::matrix({{-1.25}}), p, 0);
        CHECK(out.item() == -1.25);
    }
    SUBCASE("zero scores give the mean of value rows") {
        AttentionParams p = identity_params(2);
        p.query.weight = Tensor::zeros({2, 2});
        Tensor visual = Tensor::matrix({{1, 2}, {3, 5}, {-1, 0}});
        Tensor out = cross_attention(Tensor::matrix({{4, 4}, {1, 0}}), visual, p, 0);
        for (std::size_t i = 0; i < 2; ++i) {
            CHECK(out.at(i, 0) == doctest::Approx(1.0));
            CHECK(out.at(i, 1) == doctest::Approx(7.0 / 3));
        }
    }
    SUBCASE("random 3x4 inputs against loop oracle") {
        Rng rng(1);
        AttentionParams p = oracle::random_attention(rng, 4, 2, 2);
        Tensor text = oracle::random_tensor(rng, {3, 4});
        Tensor visual = oracle::random_tensor(rng, {3, 4});
        for (std::size_t h = 0; h < 2; ++h) {
            auto in = oracle::head_inputs(text, text, visual, p, h);
            CHECK(oracle::max_abs_diff(oracle::plain_head(in), cross_attention(text, visual, p, h)) < 1e-6);
        }
    }
    SUBCASE("width mismatch") {
        Rng rng(1);
        AttentionParams p = oracle::random_attention(rng, 4, 2, 2);
        CHECK_THROWS_AS(cross_attention(Tensor::zeros({2, 3}), Tensor::zeros({2, 4}), p, 0), Error);
    }
}

TEST_CASE("fda_scores") {
    Rng rng(2);
    AttentionParams p = oracle::random_attention(rng, 4, 2, 2);
    Tensor text = oracle::random_tensor(rng, {3, 4});
    Tensor visual = oracle::random_tensor(rng, {5, 4});

    SUBCASE("saturated mask reproduces the plain pre-softmax scores") {
        auto in = oracle::head_inputs(text, text, visual, p, 1);
        CHECK(oracle::max_abs_diff(oracle::raw_scores(in.q, in.k), fda_scores(text, visual, p, 1)) < 1e-12);
    }
    SUBCASE("orthogonal projections give zero scores") {
        AttentionParams q = identity_params(2);
        Tensor s = fda_scores(Tensor::matrix({{1, 0}, {2, 0}}), Tensor::matrix({{0, 3}, {0, -1}, {0, 7}}), q, 0);
        for (Scalar v : s.data()) CHECK(v == 0);
    }
    SUBCASE("loop oracle") {
        Tensor ftext = oracle::random_tensor(rng, {3, 4});
        for (std::size_t h = 0; h < 2; ++h) {
            auto in = oracle::head_inputs(text, ftext, visual, p, h);
            CHECK(oracle::max_abs_diff(oracle::raw_scores(in.qf, in.k), fda_scores(ftext, visual, p, h)) < 1e-6);
        }
    }
}

TEST_CASE("fda_distractions") {
    SUBCASE("uniform square scores make both distractions the mean value row") {
        // text-axis weights are 1/n_t, so the two branches coincide only when n_t == n_v
        Tensor s = Tensor::filled({3, 3}, 0.7);
        Tensor v = Tensor::matrix({{1, 0}, {2, 6}, {3, 3}});
        Distractions d = fda_distractions(s, v);
        CHECK(max_abs_diff(d.along_visual, d.along_text) < 1e-12);
        CHECK(d.along_visual.at(0, 0) == doctest::Approx(2.0));
        CHECK(d.along_visual.at(1, 1) == doctest::Approx(3.0));
        Distractions wide = fda_distractions(Tensor::filled({2, 3}, 0.7), v);
        CHECK(wide.along_text.at(0, 0) == doctest::Approx(3.0));
    }
    SUBCASE("single text row makes the text-axis distraction the column sum") {
        Tensor s = Tensor::matrix({{0.1, -2, 5}});
        Tensor v = Tensor::matrix({{1, 0}, {2, 6}, {3, 3}});
        Distractions d = fda_distractions(s, v);
        CHECK(d.along_text.at(0, 0) == doctest::Approx(6.0));
        CHECK(d.along_text.at(0, 1) == doctest::Approx(9.0));
    }
    SUBCASE("loop oracle on both axes") {
        Rng rng(3);
        for (int trial = 0; trial < 10; ++trial) {
            Tensor s = oracle::random_tensor(rng, {4, 6}, -3, 3);
            Tensor v = oracle::random_tensor(rng, {6, 2});
            Distractions d = fda_distractions(s, v);
            auto sm = oracle::to_mat(s);
            auto vm = oracle::to_mat(v);
            CHECK(oracle::max_abs_diff(oracle::matmul(oracle::softmax_rows(sm), vm), d.along_visual) < 1e-6);
            CHECK(oracle::max_abs_diff(oracle::matmul(oracle::softmax_cols(sm), vm), d.along_text) < 1e-6);
        }
    }
    SUBCASE("shape mismatch") {
        CHECK_THROWS_AS(fda_distractions(Tensor::zeros({2, 3}), Tensor::zeros({2, 2})), Error);
    }
}

TEST_CASE("fda_subtract") {
    Rng rng(4);
    Tensor att = oracle::random_tensor(rng, {3, 2});
    Tensor t = oracle::random_tensor(rng, {3, 2});
    Tensor v = oracle::random_tensor(rng, {3, 2});
    SUBCASE("gate zero is the identity") {
        CHECK(bitwise_equal(fda_subtract(att, t, v, GateParam::fixed(0)), att));
    }
    SUBCASE("equal branches") {
        Tensor out = fda_subtract(att, t, t, GateParam::fixed(0.4));
        for (std::size_t i = 0; i < att.numel(); ++i) CHECK(out[i] == doctest::Approx(att[i] - 0.4 * t[i]));
    }
    SUBCASE("takes the elementwise minimum") {
        Tensor out = fda_subtract(Tensor::matrix({{1}}), Tensor::matrix({{2}}), Tensor::matrix({{-1}}), GateParam::fixed(1));
        CHECK(out.item() == -1);
    }
    SUBCASE("row branch keeps one branch per row") {
        Tensor a = Tensor::matrix({{0, 0}});
        Tensor out = fda_subtract(a, Tensor::matrix({{3, -2}}), Tensor::matrix({{0, 0.5}}), Tensor::scalar(1), SubtractMode::RowBranch);
        // branch sums: -(1) vs -(0.5); the visual-axis branch is smaller
        CHECK(out.at(0, 0) == -3);
        CHECK(out.at(0, 1) == 2);
    }
    SUBCASE("shape mismatch") {
        CHECK_THROWS_AS(fda_subtract(att, Tensor::zeros({2, 2}), v, GateParam::fixed(1)), Error);
    }
    SUBCASE("fixed gate range") { CHECK_THROWS_AS(GateParam::fixed(1.5), Error); }
    SUBCASE("learnable gate starts at one half") { CHECK(GateParam::learnable().value() == 0.5); }
}

TEST_CASE("placement grammar") {
    PlacementSpec a = parse_placement("L0,H0-5");
    CHECK(a.layers.range == std::pair<std::size_t, std::size_t>{0, 0});
    CHECK(a.heads.range == std::pair<std::size_t, std::size_t>{0, 5});
    for (std::size_t h = 0; h < 6; ++h) CHECK(a.active(0, h));
    CHECK_FALSE(a.active(0, 6));
    CHECK_FALSE(a.active(1, 0));

    PlacementSpec all = parse_placement("Lall,Hall");
    CHECK(all.layers.all);
    CHECK(all.heads.all);

    PlacementSpec b = parse_placement("L0-1,H0-5");
    CHECK(b.active(1, 5));

    for (const char* bad : {"L9", "H0", "L,H0", "Lx,H0", "L0,Hall,", "L3-1,H0", "L0;H0", "", "L0,H-1"}) {
        INFO(bad);
        try {
            parse_placement(bad);
            FAIL("expected ParseError");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::ParseError);
        }
    }
    CHECK(parse_placement("none").empty());
    CHECK(to_string(PlacementSpec::none()) == "none");

    try {
        parse_placement("L0-2,H0").validate(2, 8);
        FAIL("expected InvalidPlacement");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::InvalidPlacement);
    }
}

TEST_CASE("placement print/parse round trip on published row labels") {
    for (const char* label : {"L0,H0-5", "L0-1,H0-5", "Lall,H0-5", "Lall,H6-11", "Lall,Hall", "L1,H3", "none"}) {
        CHECK(to_string(parse_placement(label)) == label);
    }
}

TEST_CASE("fda_multihead") {
    Rng rng(5);
    const std::size_t width = 8, heads = 4, hd = 2;
    AttentionParams p = oracle::random_attention(rng, width, heads, hd);
    Tensor text = oracle::random_tensor(rng, {4, width});
    Tensor ftext = oracle::random_tensor(rng, {4, width});
    Tensor visual = oracle::random_tensor(rng, {6, width});
    auto gates = fixed_gates(heads, 0.8);

    Tensor plain = multihead_attention(text, visual, p);

    SUBCASE("empty placement equals plain multi-head attention") {
        CHECK(bitwise_equal(fda_multihead(text, ftext, visual, p, gates, PlacementSpec::none(), 0), plain));
    }
    SUBCASE("gate zero everywhere equals plain") {
        auto zero = fixed_gates(heads, 0);
        Tensor out = fda_multihead(text, ftext, visual, p, zero, parse_placement("Lall,Hall"), 1);
        CHECK(max_abs_diff(out, plain) <= 1e-9);
    }
    SUBCASE("L0,H0-1 leaves other heads and layers on the plain path") {
        PlacementSpec place = parse_placement("L0,H0-1");
        // layer 1 is outside the placement
        CHECK(bitwise_equal(fda_multihead(text, ftext, visual, p, gates, place, 1), plain));
        // layer 0: compare each head before the output projection
        auto active = [](std::size_t h) { return h < 2; };
        auto gate = [](std::size_t) { return 0.8; };
        auto ref = oracle::multihead(text, ftext, visual, p, active, gate);
        CHECK(oracle::max_abs_diff(ref, fda_multihead(text, ftext, visual, p, gates, place, 0)) < 1e-9);
        for (std::size_t h = 2; h < heads; ++h) {
            auto in = oracle::head_inputs(text, ftext, visual, p, h);
            CHECK(oracle::max_abs_diff(oracle::plain_head(in), cross_attention(text, visual, p, h)) < 1e-12);
        }
    }
    SUBCASE("one gate per head is required") {
        std::vector<GateParam> few(2, GateParam::fixed(1));
        CHECK_THROWS_AS(fda_multihead(text, ftext, visual, p, few, parse_placement("Lall,Hall"), 0), Error);
    }
    SUBCASE("function text must keep the sequence length") {
        CHECK_THROWS_AS(fda_multihead(text, oracle::random_tensor(rng, {3, width}), visual, p, gates,
                                      parse_placement("Lall,Hall"), 0),
                        Error);
    }
}

TEST_CASE("saturated mask with unit gate cancels the visual-axis branch") {
    Rng rng(6);
    AttentionParams p = oracle::random_attention(rng, 4, 1, 4);
    Tensor text = oracle::random_tensor(rng, {3, 4});
    Tensor visual = oracle::random_tensor(rng, {5, 4});
    Tensor att = cross_attention(text, visual, p, 0);
    Tensor s = fda_scores(text, visual, p, 0);
    Tensor vproj = slice(apply(p.value, visual), 1, 0, 4);
    Distractions d = fda_distractions(s, vproj);
    CHECK(max_abs_diff(d.along_visual, att) < 1e-12);
    Tensor out = fda_subtract(att, d.along_visual, d.along_text, GateParam::fixed(1));
    Tensor expect = elementwise_min(sub(att, d.along_visual), sub(att, d.along_text));
    CHECK(bitwise_equal(out, expect));
    for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out[i] <= 1e-12);
}

TEST_CASE("head locality") {
    Rng rng(7);
    const std::size_t width = 8, heads = 4, hd = 2;
    AttentionParams p = oracle::random_attention(rng, width, heads, hd);
    Tensor text = oracle::random_tensor(rng, {3, width});
    Tensor ftext = oracle::random_tensor(rng, {3, width});
    Tensor visual = oracle::random_tensor(rng, {5, width});
    auto fda_head_out = [&](const AttentionParams& params) {
        Tensor att = cross_attention(text, visual, params, 0);
        Tensor vproj = slice(apply(params.value, visual), 1, 0, hd);
        Distractions d = fda_distractions(fda_scores(ftext, visual, params, 0), vproj);
        return fda_subtract(att, d.along_visual, d.along_text, GateParam::fixed(0.6));
    };
    Tensor before = fda_head_out(p);
    // perturb head 3's query/key/value columns
    AttentionParams q = p;
    for (Linear* l : {&q.query, &q.key, &q.value}) {
        std::vector<Scalar> w(l->weight.data().begin(), l->weight.data().end());
        for (std::size_t r = 0; r < width; ++r)
            for (std::size_t c = 3 * hd; c < 4 * hd; ++c) w[r * (heads * hd) + c] += 0.37;
        l->weight = Tensor(l->weight.shape(), w);
    }
    CHECK(bitwise_equal(before, fda_head_out(q)));
}

TEST_CASE("fda_multihead gradients match finite differences, including the learnable gate") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed + 100);
        const std::size_t width = 4, heads = 2, hd = 2;
        AttentionParams p = oracle::random_attention(rng, width, heads, hd);
        std::vector<Tensor> leaves = {oracle::random_tensor(rng, {3, width}), oracle::random_tensor(rng, {3, width}),
                                      oracle::random_tensor(rng, {4, width}), p.query.weight, p.key.weight,
                                      Tensor::vector({static_cast<Scalar>(rng.uniform(-1, 1))})};
        auto build = [&](const std::vector<Tensor>& l) {
            AttentionParams q = p;
            q.query.weight = l[3];
            q.key.weight = l[4];
            GateParam g = GateParam::learnable();
            g.raw = l[5];
            std::vector<GateParam> gates = {g, g};
            return fda_multihead(l[0], l[1], l[2], q, gates, parse_placement("L0,H1"), 0);
        };
        double err = gradcheck::max_relative_error(leaves, build, seed);
        INFO("seed " << seed << " err " << err);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("fda_self_attention") {
    Rng rng(9);
    AttentionParams p = oracle::random_attention(rng, 4, 2, 2);
    Tensor x = oracle::random_tensor(rng, {5, 4});
    Tensor xf = oracle::random_tensor(rng, {5, 4});
    auto gates = fixed_gates(2, 0.0);
    CHECK(bitwise_equal(fda_self_attention(x, xf, p, gates, {1, 1}), multihead_attention(x, x, p)));
    auto half = fixed_gates(2, 0.5);
    CHECK(bitwise_equal(fda_self_attention(x, xf, p, half, {0, 0}), multihead_attention(x, x, p)));
    Tensor with = fda_self_attention(x, xf, p, half, {1, 0});
    CHECK(max_abs_diff(with, multihead_attention(x, x, p)) > 0);
}

TEST_CASE("attention_probabilities stages") {
    Rng rng(10);
    AttentionParams p = oracle::random_attention(rng, 4, 2, 2, 1.0);
    Tensor text = oracle::random_tensor(rng, {3, 4});
    Tensor ftext = oracle::random_tensor(rng, {3, 4});
    Tensor visual = oracle::random_tensor(rng, {5, 4});
    Tensor orig = attention_probabilities(text, ftext, visual, p, 1, 0.5, HeatmapStage::Original);
    for (std::size_t i = 0; i < 3; ++i) {
        double row = 0;
        for (std::size_t j = 0; j < 5; ++j) row += orig.at(i, j);
        CHECK(std::abs(row - 1) <= 1e-6);
    }
    CHECK(bitwise_equal(attention_probabilities(text, ftext, visual, p, 1, 0, HeatmapStage::FullFda), orig));
    Tensor one = attention_probabilities(text, ftext, visual, p, 1, 0.5, HeatmapStage::OneSubtraction);
    Tensor full = attention_probabilities(text, ftext, visual, p, 1, 0.5, HeatmapStage::FullFda);
    for (std::size_t i = 0; i < full.numel(); ++i) {
        CHECK(full[i] <= orig[i]);
        CHECK(full[i] <= one[i]);
    }
    CHECK_THROWS_AS(attention_probabilities(text, ftext, visual, p, 2, 0.5, HeatmapStage::Original), Error);
}
