#include "fda/attention.hpp"

#include "fda/error.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <limits>
#include <cmath>

namespace fda {

Tensor apply(const Linear& layer, const Tensor& x) { return add_row(matmul(x, layer.weight), layer.bias); }

void AttentionParams::validate() const {
    const std::size_t w = width();
    if (heads == 0 || head_dim == 0) fail(ErrorKind::ShapeMismatch, "attention needs at least one head of nonzero width");
    for (const Linear* l : {&query, &key, &value}) {
        if (l->weight.rank() != 2 || l->weight.dim(1) != w || l->bias.numel() != w) {
            fail(ErrorKind::ShapeMismatch, "projection " + shape_string(l->weight.shape()) + " inconsistent with " +
                                               std::to_string(heads) + " heads x " + std::to_string(head_dim));
        }
    }
    if (output.weight.rank() != 2 || output.weight.dim(0) != w) {
        fail(ErrorKind::ShapeMismatch, "output projection " + shape_string(output.weight.shape()));
    }
}

// ---- gates ------------------------------------------------------------------------

std::string_view to_string(GateMode mode) { return mode == GateMode::Learnable ? "learnable" : "fixed"; }

GateMode parse_gate_mode(std::string_view name) {
    if (name == "learnable") return GateMode::Learnable;
    if (name == "fixed") return GateMode::Fixed;
    fail(ErrorKind::ParseError, "unknown gate mode '" + std::string(name) + "'");
}

GateParam GateParam::learnable(Scalar raw_value) {
    GateParam g;
    g.mode = GateMode::Learnable;
    g.raw = Tensor::scalar(raw_value);
    return g;
}

GateParam GateParam::fixed(Scalar value) {
    if (!(value >= 0 && value <= 1)) fail(ErrorKind::RangeError, "fixed gate must lie in [0,1]");
    GateParam g;
    g.mode = GateMode::Fixed;
    g.fixed_value = value;
    return g;
}

Tensor GateParam::effective() const {
    if (mode == GateMode::Fixed) return Tensor::scalar(fixed_value);
    return sigmoid(raw);
}

Scalar GateParam::value() const {
    if (mode == GateMode::Fixed) return fixed_value;
    const Scalar r = raw.item();
    return Scalar{1} / (Scalar{1} + std::exp(-r));
}

// ---- placement --------------------------------------------------------------------

bool IndexSet::contains(std::size_t i) const {
    if (all) return true;
    return range && i >= range->first && i <= range->second;
}

std::string IndexSet::to_string() const {
    if (all) return "all";
    if (!range) return "none";
    if (range->first == range->second) return std::to_string(range->first);
    return std::to_string(range->first) + "-" + std::to_string(range->second);
}

std::string_view to_string(EncoderSite site) {
    switch (site) {
    case EncoderSite::Fusion: return "fusion";
    case EncoderSite::Text: return "text";
    case EncoderSite::Both: return "both";
    }
    return "fusion";
}

EncoderSite parse_encoder_site(std::string_view name) {
    if (name == "fusion") return EncoderSite::Fusion;
    if (name == "text") return EncoderSite::Text;
    if (name == "both") return EncoderSite::Both;
    fail(ErrorKind::ParseError, "unknown encoder site '" + std::string(name) + "'");
}

PlacementSpec PlacementSpec::none() { return PlacementSpec{}; }

bool PlacementSpec::active(std::size_t layer, std::size_t head) const {
    return layers.contains(layer) && heads.contains(head);
}

void PlacementSpec::validate(std::size_t layer_count, std::size_t head_count) const {
    if (layers.range && layers.range->second >= layer_count) {
        fail(ErrorKind::InvalidPlacement, "layer range " + layers.to_string() + " exceeds depth " + std::to_string(layer_count));
    }
    if (heads.range && heads.range->second >= head_count) {
        fail(ErrorKind::InvalidPlacement, "head range " + heads.to_string() + " exceeds head count " + std::to_string(head_count));
    }
}

namespace {

std::size_t parse_index(std::string_view s, std::string_view whole) {
    std::size_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
        fail(ErrorKind::ParseError, "bad index '" + std::string(s) + "' in placement '" + std::string(whole) + "'");
    }
    return v;
}

IndexSet parse_range(std::string_view s, std::string_view whole) {
    IndexSet set;
    if (s == "all") {
        set.all = true;
        return set;
    }
    auto dash = s.find('-');
    if (dash == std::string_view::npos) {
        std::size_t v = parse_index(s, whole);
        set.range = {v, v};
        return set;
    }
    std::size_t lo = parse_index(s.substr(0, dash), whole);
    std::size_t hi = parse_index(s.substr(dash + 1), whole);
    if (lo > hi) fail(ErrorKind::ParseError, "descending range in placement '" + std::string(whole) + "'");
    set.range = {lo, hi};
    return set;
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

} // namespace

PlacementSpec parse_placement(std::string_view text) {
    const std::string_view s = trim(text);
    if (s == "none") return PlacementSpec::none();
    auto comma = s.find(',');
    if (comma == std::string_view::npos) {
        fail(ErrorKind::ParseError, "placement '" + std::string(s) + "' lacks a head clause");
    }
    std::string_view lpart = trim(s.substr(0, comma));
    std::string_view hpart = trim(s.substr(comma + 1));
    if (lpart.size() < 2 || lpart.front() != 'L') fail(ErrorKind::ParseError, "placement '" + std::string(s) + "' lacks a layer clause");
    if (hpart.size() < 2 || hpart.front() != 'H') fail(ErrorKind::ParseError, "placement '" + std::string(s) + "' lacks a head clause");
    PlacementSpec p;
    p.layers = parse_range(lpart.substr(1), s);
    p.heads = parse_range(hpart.substr(1), s);
    return p;
}

std::string to_string(const PlacementSpec& placement) {
    if (placement.empty()) return "none";
    return "L" + placement.layers.to_string() + ",H" + placement.heads.to_string();
}

// ---- pipeline ----------------------------------------------------------------------

namespace {

void require_width(const Tensor& x, const AttentionParams& params, const char* what) {
    if (x.rank() != 2 || x.dim(1) != params.query.weight.dim(0)) {
        fail(ErrorKind::ShapeMismatch, std::string(what) + " " + shape_string(x.shape()) + " does not match projection input width " +
                                           std::to_string(params.query.weight.dim(0)));
    }
}

void require_head(const AttentionParams& params, std::size_t head) {
    if (head >= params.heads) fail(ErrorKind::InvalidIndex, "head " + std::to_string(head) + " of " + std::to_string(params.heads));
}

Tensor head_slice(const Tensor& projected, const AttentionParams& params, std::size_t head) {
    return slice(projected, 1, head * params.head_dim, params.head_dim);
}

Tensor scaled_scores(const Tensor& q, const Tensor& k, std::size_t head_dim) {
    return scale(matmul(q, transpose(k)), Scalar{1} / std::sqrt(static_cast<Scalar>(head_dim)));
}

Tensor apply_key_mask(const Tensor& scores, const std::vector<std::uint8_t>* key_keep) {
    if (key_keep == nullptr) return scores;
    const std::size_t rows = scores.dim(0), cols = scores.dim(1);
    if (key_keep->size() != cols) fail(ErrorKind::ShapeMismatch, "key mask length differs from key count");
    std::vector<std::uint8_t> drop(rows * cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) drop[i * cols + j] = (*key_keep)[j] ? 0 : 1;
    return masked_fill(scores, drop, Scalar{-1e9});
}

struct Projections {
    Tensor q, k, v;
};

Projections project(const Tensor& queries, const Tensor& context, const AttentionParams& params) {
    params.validate();
    require_width(queries, params, "queries");
    require_width(context, params, "context");
    return {apply(params.query, queries), apply(params.key, context), apply(params.value, context)};
}

} // namespace

Tensor cross_attention(const Tensor& text, const Tensor& visual, const AttentionParams& params, std::size_t head) {
    require_head(params, head);
    Projections p = project(text, visual, params);
    Tensor probs = softmax(scaled_scores(head_slice(p.q, params, head), head_slice(p.k, params, head), params.head_dim), -1);
    return matmul(probs, head_slice(p.v, params, head));
}

Tensor fda_scores(const Tensor& function_text, const Tensor& visual, const AttentionParams& params, std::size_t head) {
    require_head(params, head);
    params.validate();
    require_width(function_text, params, "function-word text");
    require_width(visual, params, "visual");
    Tensor qf = apply(params.query, function_text);
    Tensor k = apply(params.key, visual);
    return scaled_scores(head_slice(qf, params, head), head_slice(k, params, head), params.head_dim);
}

Distractions fda_distractions(const Tensor& scores, const Tensor& value_proj) {
    if (scores.rank() != 2 || value_proj.rank() != 2 || scores.dim(1) != value_proj.dim(0)) {
        fail(ErrorKind::ShapeMismatch, "scores " + shape_string(scores.shape()) + " vs values " + shape_string(value_proj.shape()));
    }
    return {matmul(softmax(scores, -1), value_proj), matmul(softmax(scores, -2), value_proj)};
}

std::string_view to_string(SubtractMode mode) { return mode == SubtractMode::Elementwise ? "elementwise" : "row_branch"; }

SubtractMode parse_subtract_mode(std::string_view name) {
    if (name == "elementwise") return SubtractMode::Elementwise;
    if (name == "row_branch") return SubtractMode::RowBranch;
    fail(ErrorKind::ParseError, "unknown subtract mode '" + std::string(name) + "'");
}

Tensor fda_subtract(const Tensor& attention, const Tensor& along_visual, const Tensor& along_text, const Tensor& gate,
                    SubtractMode mode) {
    if (attention.shape() != along_visual.shape() || attention.shape() != along_text.shape()) {
        fail(ErrorKind::ShapeMismatch, "fda_subtract operands " + shape_string(attention.shape()) + ", " +
                                           shape_string(along_visual.shape()) + ", " + shape_string(along_text.shape()));
    }
    Tensor a = sub(attention, scale_by(along_visual, gate));
    Tensor b = sub(attention, scale_by(along_text, gate));
    if (mode == SubtractMode::Elementwise) return elementwise_min(a, b);

    const std::size_t rows = a.dim(0), cols = a.numel() / rows;
    std::vector<std::uint8_t> take_a(a.numel());
    for (std::size_t i = 0; i < rows; ++i) {
        Scalar sa = 0, sb = 0;
        for (std::size_t j = 0; j < cols; ++j) {
            sa += a[i * cols + j];
            sb += b[i * cols + j];
        }
        std::fill_n(take_a.begin() + static_cast<std::ptrdiff_t>(i * cols), cols, sa <= sb ? 1 : 0);
    }
    return select(take_a, a, b);
}

Tensor fda_subtract(const Tensor& attention, const Tensor& along_visual, const Tensor& along_text,
                    const GateParam& gate, SubtractMode mode) {
    return fda_subtract(attention, along_visual, along_text, gate.effective(), mode);
}

Tensor multihead_attention(const Tensor& queries, const Tensor& context, const AttentionParams& params,
                           const std::vector<std::uint8_t>* key_keep) {
    Projections p = project(queries, context, params);
    std::vector<Tensor> heads;
    heads.reserve(params.heads);
    for (std::size_t h = 0; h < params.heads; ++h) {
        Tensor scores = scaled_scores(head_slice(p.q, params, h), head_slice(p.k, params, h), params.head_dim);
        heads.push_back(matmul(softmax(apply_key_mask(scores, key_keep), -1), head_slice(p.v, params, h)));
    }
    return apply(params.output, concat(heads, 1));
}

Tensor fda_multihead(const Tensor& text, const Tensor& function_text, const Tensor& visual,
                     const AttentionParams& params, std::span<const GateParam> gates,
                     const PlacementSpec& placement, std::size_t layer, SubtractMode mode) {
    placement.validate(std::numeric_limits<std::size_t>::max(), params.heads);
    Projections p = project(text, visual, params);
    const bool any_active = [&] {
        for (std::size_t h = 0; h < params.heads; ++h)
            if (placement.active(layer, h)) return true;
        return false;
    }();
    Tensor qf;
    if (any_active) {
        if (gates.size() != params.heads) fail(ErrorKind::InvalidPlacement, "one gate per head required");
        require_width(function_text, params, "function-word text");
        if (function_text.dim(0) != text.dim(0)) {
            fail(ErrorKind::ShapeMismatch, "function-word text must keep the text sequence length");
        }
        qf = apply(params.query, function_text);
    }
    std::vector<Tensor> heads;
    heads.reserve(params.heads);
    for (std::size_t h = 0; h < params.heads; ++h) {
        Tensor k = head_slice(p.k, params, h);
        Tensor v = head_slice(p.v, params, h);
        Tensor att = matmul(softmax(scaled_scores(head_slice(p.q, params, h), k, params.head_dim), -1), v);
        if (placement.active(layer, h)) {
            Distractions d = fda_distractions(scaled_scores(head_slice(qf, params, h), k, params.head_dim), v);
            att = fda_subtract(att, d.along_visual, d.along_text, gates[h], mode);
        }
        heads.push_back(att);
    }
    return apply(params.output, concat(heads, 1));
}

Tensor fda_self_attention(const Tensor& hidden, const Tensor& function_hidden, const AttentionParams& params,
                          std::span<const GateParam> gates, const std::vector<std::uint8_t>& active,
                          SubtractMode mode) {
    Projections p = project(hidden, hidden, params);
    if (active.size() != params.heads || gates.size() != params.heads) {
        fail(ErrorKind::InvalidPlacement, "one gate and activity flag per head required");
    }
    require_width(function_hidden, params, "function-word hidden");
    const bool any_active = std::any_of(active.begin(), active.end(), [](std::uint8_t a) { return a != 0; });
    Tensor kf, vf;
    if (any_active) {
        kf = apply(params.key, function_hidden);
        vf = apply(params.value, function_hidden);
    }
    std::vector<Tensor> heads;
    heads.reserve(params.heads);
    for (std::size_t h = 0; h < params.heads; ++h) {
        Tensor q = head_slice(p.q, params, h);
        Tensor att = matmul(softmax(scaled_scores(q, head_slice(p.k, params, h), params.head_dim), -1),
                            head_slice(p.v, params, h));
        if (active[h]) {
            Distractions d = fda_distractions(scaled_scores(q, head_slice(kf, params, h), params.head_dim),
                                              head_slice(vf, params, h));
            att = fda_subtract(att, d.along_visual, d.along_text, gates[h], mode);
        }
        heads.push_back(att);
    }
    return apply(params.output, concat(heads, 1));
}

std::string_view to_string(HeatmapStage stage) {
    switch (stage) {
    case HeatmapStage::Original: return "original";
    case HeatmapStage::OneSubtraction: return "one_subtraction";
    case HeatmapStage::FullFda: return "full_fda";
    }
    return "original";
}

HeatmapStage parse_heatmap_stage(std::string_view name) {
    for (auto s : {HeatmapStage::Original, HeatmapStage::OneSubtraction, HeatmapStage::FullFda}) {
        if (to_string(s) == name) return s;
    }
    fail(ErrorKind::ParseError, "unknown heatmap stage '" + std::string(name) + "'");
}

Tensor attention_probabilities(const Tensor& text, const Tensor& function_text, const Tensor& visual,
                               const AttentionParams& params, std::size_t head, Scalar gate, HeatmapStage stage) {
    require_head(params, head);
    Projections p = project(text, visual, params);
    Tensor k = head_slice(p.k, params, head);
    Tensor probs = softmax(scaled_scores(head_slice(p.q, params, head), k, params.head_dim), -1);
    if (stage == HeatmapStage::Original) return probs;
    Tensor s = fda_scores(function_text, visual, params, head);
    Tensor one = sub(probs, scale(softmax(s, -1), gate));
    if (stage == HeatmapStage::OneSubtraction) return one;
    return elementwise_min(one, sub(probs, scale(softmax(s, -2), gate)));
}

} // namespace fda
