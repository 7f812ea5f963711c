#pragma once

#include "fda/attention.hpp"
#include "fda/corpus.hpp"
#include "fda/tensor.hpp"
#include "fda/textproc.hpp"

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace fda {

struct ModelConfig {
    std::size_t image_side = 32;
    std::size_t channels = 3;
    std::size_t patch = 8;
    std::size_t heads = 8;
    std::size_t head_dim = 8;
    std::size_t mlp_hidden = 128;
    std::size_t max_len = 16;
    std::size_t text_layers = 2;
    std::size_t fusion_layers = 2;
    std::size_t vision_layers = 1;
    PlacementSpec placement;  // empty = baseline model
    GateMode gate_mode = GateMode::Learnable;
    Scalar gate_value = 0;  // fixed mode: the gate; learnable mode: the initial raw logit
    SubtractMode subtract_mode = SubtractMode::Elementwise;
    std::vector<std::string> vocab;  // empty = [CLS], [UNK], grammar vocabulary
    std::uint64_t seed = 0;

    std::size_t width() const { return heads * head_dim; }
    std::size_t visual_tokens() const { return (image_side / patch) * (image_side / patch) + 1; }
    // Throws InvalidConfig / InvalidPlacement.
    void validate() const;
};

std::vector<std::string> default_vocabulary();

struct LayerNormParams {
    Tensor gamma;
    Tensor beta;
};

struct EncoderBlock {
    LayerNormParams ln_attn;
    AttentionParams attn;
    LayerNormParams ln_mlp;
    Linear fc1, fc2;
    std::vector<GateParam> gates;  // text encoder only, one per head
};

struct FusionBlock {
    LayerNormParams ln_self;
    AttentionParams self_attn;
    LayerNormParams ln_cross;
    AttentionParams cross;
    LayerNormParams ln_mlp;
    Linear fc1, fc2;
    std::vector<GateParam> gates;  // one per head; only placed heads carry parameters
};

// Text features for one caption: the full stream F_T and the stream F_Tf whose
// self-attention only sees function words (and [CLS]). Both keep the length.
struct TextFeatures {
    Tensor text;
    Tensor function_text;
};

class Model {
public:
    explicit Model(ModelConfig config, FunctionWordDictionary dictionary = FunctionWordDictionary::builtin());

    const ModelConfig& config() const { return config_; }
    const FunctionWordDictionary& dictionary() const { return dictionary_; }

    // Every trainable tensor with its checkpoint name, in a fixed order.
    std::vector<std::pair<std::string, Tensor>> parameters() const;
    std::size_t parameter_count() const;
    // Parameters are frozen (no gradient tracking) unless training.
    void set_trainable(bool trainable);

    std::vector<std::size_t> token_ids(const TokenSequence& seq) const;

    // [n_v x d] visual features, [CLS] first.
    Tensor encode_image(const Tensor& pixels) const;
    // [n_t x d]; self-attention keys restricted to mask-selected tokens.
    Tensor encode_text(const TokenSequence& seq, const TokenMask& mask) const;
    TextFeatures encode_text(const TokenSequence& seq) const;

    // Scalar matching logit; higher means a better match.
    Tensor score(const Tensor& pixels, const TokenSequence& seq) const;
    Tensor score_features(const Tensor& visual, const TextFeatures& text) const;

    // Normalized inputs to a fusion layer's cross-attention, for heatmaps.
    // The function-word stream is computed even for baseline models.
    struct CrossInputs {
        Tensor text, function_text, visual;
    };
    CrossInputs cross_inputs(const Tensor& visual, const TokenSequence& seq, std::size_t layer) const;

    const std::vector<FusionBlock>& fusion() const { return fusion_; }

    bool operator==(const Model& other) const;  // bitwise on parameters and config

private:
    friend Model load_checkpoint(const std::string& path);

    void build();
    Tensor encoder_block(const EncoderBlock& b, const Tensor& x, const std::vector<std::uint8_t>* keep) const;
    Tensor mlp(const LayerNormParams& ln, const Linear& fc1, const Linear& fc2, const Tensor& x) const;

    ModelConfig config_;
    FunctionWordDictionary dictionary_;
    std::map<std::string, std::size_t, std::less<>> vocab_index_;

    Linear patch_embed;
    Tensor vis_cls, vis_pos;
    std::vector<EncoderBlock> vision_;
    LayerNormParams vis_ln;

    Tensor tok_embed, txt_pos;
    std::vector<EncoderBlock> text_;
    LayerNormParams txt_ln;

    std::vector<FusionBlock> fusion_;
    LayerNormParams head_ln;
    Linear head;
};

std::string gate_name(std::string_view site, std::size_t layer, std::size_t head);

// ---- training -------------------------------------------------------------------------

struct TrainConfig {
    std::size_t epochs = 5;
    Scalar lr = 0.05;
    std::size_t batch_size = 2;
    std::size_t negatives = 1;  // circular shifts per batch (1..batch_size-1)
    std::uint64_t seed = 0;
};

struct TrainReport {
    std::vector<Scalar> step_losses;
    std::vector<Scalar> epoch_losses;  // mean over the epoch's steps
};

// SGD on binary cross-entropy: matched pairs are positives, in-batch circular
// shifts are negatives. Uses the train split when present, otherwise all items.
TrainReport train(Model& model, const std::vector<CorpusItem>& corpus, const TrainConfig& cfg);

// ---- retrieval ------------------------------------------------------------------------

enum class Direction { T2I, I2T };

std::string_view to_string(Direction d);

// scores[i][j] = score(image i, caption j).
using ScoreMatrix = std::vector<std::vector<Scalar>>;

ScoreMatrix score_matrix(const Model& model, const std::vector<CorpusItem>& items, std::size_t threads = 1);

// 1-based rank of `target` when sorting by descending score, ties broken by index.
std::size_t rank_of(const std::vector<Scalar>& scores, std::size_t target);

// Per query, gallery indices sorted by descending score (stable by index).
// T2I: queries are captions, gallery images. I2T: the reverse.
std::vector<std::vector<std::size_t>> retrieve(const ScoreMatrix& scores, Direction d);
std::vector<std::vector<std::size_t>> retrieve(const Model& model, const std::vector<CorpusItem>& items, Direction d);

// Percentage of queries whose matching item ranks within k.
double recall_at(const ScoreMatrix& scores, Direction d, std::size_t k);

// ---- checkpoints ----------------------------------------------------------------------

void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

} // namespace fda
