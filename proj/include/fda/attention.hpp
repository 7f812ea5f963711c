#pragma once

#include "fda/tensor.hpp"

#include <cstddef>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fda {

struct Linear {
    Tensor weight;  // [in x out]
    Tensor bias;    // [out]
};

Tensor apply(const Linear& layer, const Tensor& x);

// Per-head Q/K/V projections packed column-wise: head h owns columns
// [h*head_dim, (h+1)*head_dim) of the query/key/value outputs.
struct AttentionParams {
    Linear query;
    Linear key;
    Linear value;
    Linear output;
    std::size_t heads = 0;
    std::size_t head_dim = 0;

    std::size_t width() const { return heads * head_dim; }
    void validate() const;
};

enum class GateMode { Learnable, Fixed };

std::string_view to_string(GateMode mode);
GateMode parse_gate_mode(std::string_view name);

// Control gate on the subtracted distraction. Learnable gates are
// logistic(raw); fixed gates are a constant in [0,1].
struct GateParam {
    GateMode mode = GateMode::Fixed;
    Tensor raw;  // [1], learnable mode only
    Scalar fixed_value = 0;

    static GateParam learnable(Scalar raw_value = 0);
    static GateParam fixed(Scalar value);

    Tensor effective() const;
    Scalar value() const;
};

// Contiguous index range, "all", or nothing.
struct IndexSet {
    bool all = false;
    std::optional<std::pair<std::size_t, std::size_t>> range;  // inclusive

    bool contains(std::size_t i) const;
    bool empty() const { return !all && !range; }
    std::string to_string() const;
    bool operator==(const IndexSet&) const = default;
};

enum class EncoderSite { Fusion, Text, Both };

std::string_view to_string(EncoderSite site);
EncoderSite parse_encoder_site(std::string_view name);

struct PlacementSpec {
    IndexSet layers;
    IndexSet heads;
    EncoderSite site = EncoderSite::Fusion;

    static PlacementSpec none();
    bool empty() const { return layers.empty() || heads.empty(); }
    bool active(std::size_t layer, std::size_t head) const;
    bool covers_fusion() const { return site != EncoderSite::Text; }
    bool covers_text() const { return site != EncoderSite::Fusion; }
    // Throws InvalidPlacement when an explicit index exceeds the model.
    void validate(std::size_t layer_count, std::size_t head_count) const;

    bool operator==(const PlacementSpec&) const = default;
};

// Grammar: "L<range>,H<range>" with range = "all" | "<n>" | "<n>-<m>", or "none".
PlacementSpec parse_placement(std::string_view text);
std::string to_string(const PlacementSpec& placement);

// ---- attention pipeline ------------------------------------------------------

// softmax(Q(F_T) K(F_V)^T / sqrt(d_k), visual axis) V(F_V) for one head.
Tensor cross_attention(const Tensor& text, const Tensor& visual, const AttentionParams& params, std::size_t head);

// Pre-softmax function-word scores Q(F_Tf) K(F_V)^T / sqrt(d_k), [n_t x n_v].
Tensor fda_scores(const Tensor& function_text, const Tensor& visual, const AttentionParams& params, std::size_t head);

struct Distractions {
    Tensor along_visual;  // softmax over the visual axis, per text token
    Tensor along_text;    // softmax over the text axis, per visual token
};

Distractions fda_distractions(const Tensor& scores, const Tensor& value_proj);

enum class SubtractMode { Elementwise, RowBranch };

std::string_view to_string(SubtractMode mode);
SubtractMode parse_subtract_mode(std::string_view name);

// min(Att - g*along_visual, Att - g*along_text). RowBranch keeps one whole
// branch per row, whichever has the smaller row sum.
Tensor fda_subtract(const Tensor& attention, const Tensor& along_visual, const Tensor& along_text, const Tensor& gate,
                    SubtractMode mode = SubtractMode::Elementwise);
Tensor fda_subtract(const Tensor& attention, const Tensor& along_visual, const Tensor& along_text,
                    const GateParam& gate, SubtractMode mode = SubtractMode::Elementwise);

// Plain multi-head attention of queries over context, heads concatenated and
// output-projected. key_keep (optional) excludes context rows with bit 0.
Tensor multihead_attention(const Tensor& queries, const Tensor& context, const AttentionParams& params,
                           const std::vector<std::uint8_t>* key_keep = nullptr);

// Fusion cross-attention with de-attention on the heads selected by the
// placement at this layer. gates is indexed by head; entries for heads
// outside the placement are ignored. Output [n_t x heads*head_dim] after the
// output projection.
Tensor fda_multihead(const Tensor& text, const Tensor& function_text, const Tensor& visual,
                     const AttentionParams& params, std::span<const GateParam> gates,
                     const PlacementSpec& placement, std::size_t layer,
                     SubtractMode mode = SubtractMode::Elementwise);

// Text self-attention with de-attention: distraction scores are
// Q(X) K(X_f)^T / sqrt(d_k) with values V(X_f), where X_f is the
// function-word-masked stream. Heads with active[h] == 0 stay plain.
Tensor fda_self_attention(const Tensor& hidden, const Tensor& function_hidden, const AttentionParams& params,
                          std::span<const GateParam> gates, const std::vector<std::uint8_t>& active,
                          SubtractMode mode = SubtractMode::Elementwise);

enum class HeatmapStage { Original, OneSubtraction, FullFda };

std::string_view to_string(HeatmapStage stage);
HeatmapStage parse_heatmap_stage(std::string_view name);

// [n_t x n_v] attention probabilities at a pipeline stage: P, P - g*P_visual,
// or min(P - g*P_visual, P - g*P_text).
Tensor attention_probabilities(const Tensor& text, const Tensor& function_text, const Tensor& visual,
                               const AttentionParams& params, std::size_t head, Scalar gate, HeatmapStage stage);

} // namespace fda
