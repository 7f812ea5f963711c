#include "fda/model.hpp"

#include "fda/error.hpp"
#include "fda/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace fda {

// ---- config ---------------------------------------------------------------------------

void ModelConfig::validate() const {
    auto bad = [](const std::string& msg) { fail(ErrorKind::InvalidConfig, msg); };
    if (heads == 0 || head_dim == 0) bad("heads and head_dim must be positive");
    if (patch == 0 || image_side % patch != 0) bad("image side must be divisible by the patch size");
    if (channels == 0 || mlp_hidden == 0 || max_len == 0) bad("channels, mlp_hidden and max_len must be positive");
    if (fusion_layers == 0) bad("at least one fusion layer is required");
    if (placement.covers_fusion()) placement.validate(fusion_layers, heads);
    if (placement.covers_text()) placement.validate(text_layers, heads);
    if (gate_mode == GateMode::Fixed && !(gate_value >= 0 && gate_value <= 1)) bad("fixed gate must lie in [0,1]");
}

std::vector<std::string> default_vocabulary() {
    std::vector<std::string> v = {std::string(kClsToken), "[UNK]"};
    for (auto& w : Grammar::standard().vocabulary()) v.push_back(w);
    return v;
}

std::string gate_name(std::string_view site, std::size_t layer, std::size_t head) {
    return "gate." + std::string(site) + ".L" + std::to_string(layer) + ".H" + std::to_string(head);
}

// ---- construction ----------------------------------------------------------------------

namespace {

Tensor randn(Rng& rng, Shape shape, double stddev) {
    std::vector<Scalar> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<Scalar>(rng.normal() * stddev);
    return Tensor(std::move(shape), std::move(v));
}

Linear make_linear(Rng& rng, std::size_t in, std::size_t out, double gain = 1.0) {
    return {randn(rng, {in, out}, gain / std::sqrt(static_cast<double>(in))), Tensor::zeros({out})};
}

LayerNormParams make_ln(std::size_t d) { return {Tensor::filled({d}, 1), Tensor::zeros({d})}; }

AttentionParams make_attention(Rng& rng, const ModelConfig& c) {
    const std::size_t d = c.width();
    AttentionParams p;
    // Larger query/key init so attention is not uniform at the start.
    p.query = make_linear(rng, d, d, 1.5);
    p.key = make_linear(rng, d, d, 1.5);
    p.value = make_linear(rng, d, d);
    p.output = make_linear(rng, d, d);
    p.heads = c.heads;
    p.head_dim = c.head_dim;
    return p;
}

std::vector<GateParam> make_gates(const ModelConfig& c, bool site_covered, std::size_t layer) {
    std::vector<GateParam> gates;
    for (std::size_t h = 0; h < c.heads; ++h) {
        if (site_covered && c.placement.active(layer, h)) {
            gates.push_back(c.gate_mode == GateMode::Learnable ? GateParam::learnable(c.gate_value) : GateParam::fixed(c.gate_value));
        } else {
            gates.push_back(GateParam::fixed(0));
        }
    }
    return gates;
}

using Visitor = std::function<void(const std::string&, const Tensor&)>;

void visit_linear(const Visitor& f, const std::string& name, const Linear& l) {
    f(name + ".w", l.weight);
    f(name + ".b", l.bias);
}

void visit_ln(const Visitor& f, const std::string& name, const LayerNormParams& ln) {
    f(name + ".g", ln.gamma);
    f(name + ".b", ln.beta);
}

void visit_attention(const Visitor& f, const std::string& name, const AttentionParams& a) {
    visit_linear(f, name + ".q", a.query);
    visit_linear(f, name + ".k", a.key);
    visit_linear(f, name + ".v", a.value);
    visit_linear(f, name + ".o", a.output);
}

void visit_gates(const Visitor& f, std::string_view site, std::size_t layer, const std::vector<GateParam>& gates) {
    for (std::size_t h = 0; h < gates.size(); ++h) {
        if (gates[h].mode == GateMode::Learnable) f(gate_name(site, layer, h), gates[h].raw);
    }
}

std::vector<std::uint8_t> active_heads(const ModelConfig& c, std::size_t layer) {
    std::vector<std::uint8_t> a(c.heads, 0);
    if (!c.placement.covers_text()) return a;
    for (std::size_t h = 0; h < c.heads; ++h) a[h] = c.placement.active(layer, h) ? 1 : 0;
    return a;
}

} // namespace

Model::Model(ModelConfig config, FunctionWordDictionary dictionary)
    : config_(std::move(config)), dictionary_(std::move(dictionary)) {
    if (config_.vocab.empty()) config_.vocab = default_vocabulary();
    config_.validate();
    for (std::size_t i = 0; i < config_.vocab.size(); ++i) {
        if (!vocab_index_.emplace(config_.vocab[i], i).second) fail(ErrorKind::InvalidConfig, "duplicate vocabulary entry " + config_.vocab[i]);
    }
    if (!vocab_index_.count(kClsToken) || !vocab_index_.count("[UNK]")) fail(ErrorKind::InvalidConfig, "vocabulary needs [CLS] and [UNK]");
    build();
}

void Model::build() {
    const ModelConfig& c = config_;
    const std::size_t d = c.width();
    Rng rng(c.seed);
    auto encoder_block = [&] {
        EncoderBlock b;
        b.ln_attn = make_ln(d);
        b.attn = make_attention(rng, c);
        b.ln_mlp = make_ln(d);
        b.fc1 = make_linear(rng, d, c.mlp_hidden);
        b.fc2 = make_linear(rng, c.mlp_hidden, d);
        return b;
    };

    patch_embed = make_linear(rng, c.patch * c.patch * c.channels, d);
    vis_cls = randn(rng, {1, d}, 0.5);
    vis_pos = randn(rng, {c.visual_tokens(), d}, 0.5);
    for (std::size_t l = 0; l < c.vision_layers; ++l) vision_.push_back(encoder_block());
    vis_ln = make_ln(d);

    tok_embed = randn(rng, {c.vocab.size(), d}, 1.0);
    txt_pos = randn(rng, {c.max_len, d}, 0.5);
    for (std::size_t l = 0; l < c.text_layers; ++l) {
        text_.push_back(encoder_block());
        text_.back().gates = make_gates(c, c.placement.covers_text(), l);
    }
    txt_ln = make_ln(d);

    for (std::size_t l = 0; l < c.fusion_layers; ++l) {
        FusionBlock f;
        f.ln_self = make_ln(d);
        f.self_attn = make_attention(rng, c);
        f.ln_cross = make_ln(d);
        f.cross = make_attention(rng, c);
        f.ln_mlp = make_ln(d);
        f.fc1 = make_linear(rng, d, c.mlp_hidden);
        f.fc2 = make_linear(rng, c.mlp_hidden, d);
        f.gates = make_gates(c, c.placement.covers_fusion(), l);
        fusion_.push_back(std::move(f));
    }
    head_ln = make_ln(d);
    head = make_linear(rng, d, 1);
}

std::vector<std::pair<std::string, Tensor>> Model::parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    Visitor f = [&](const std::string& name, const Tensor& t) { out.emplace_back(name, t); };
    auto visit_block = [&](const std::string& name, const EncoderBlock& b) {
        visit_ln(f, name + ".ln_attn", b.ln_attn);
        visit_attention(f, name + ".attn", b.attn);
        visit_ln(f, name + ".ln_mlp", b.ln_mlp);
        visit_linear(f, name + ".fc1", b.fc1);
        visit_linear(f, name + ".fc2", b.fc2);
    };
    visit_linear(f, "vision.patch", patch_embed);
    f("vision.cls", vis_cls);
    f("vision.pos", vis_pos);
    for (std::size_t l = 0; l < vision_.size(); ++l) visit_block("vision.L" + std::to_string(l), vision_[l]);
    visit_ln(f, "vision.ln", vis_ln);
    f("text.embed", tok_embed);
    f("text.pos", txt_pos);
    for (std::size_t l = 0; l < text_.size(); ++l) visit_block("text.L" + std::to_string(l), text_[l]);
    visit_ln(f, "text.ln", txt_ln);
    for (std::size_t l = 0; l < fusion_.size(); ++l) {
        const std::string name = "fusion.L" + std::to_string(l);
        const FusionBlock& b = fusion_[l];
        visit_ln(f, name + ".ln_self", b.ln_self);
        visit_attention(f, name + ".self", b.self_attn);
        visit_ln(f, name + ".ln_cross", b.ln_cross);
        visit_attention(f, name + ".cross", b.cross);
        visit_ln(f, name + ".ln_mlp", b.ln_mlp);
        visit_linear(f, name + ".fc1", b.fc1);
        visit_linear(f, name + ".fc2", b.fc2);
    }
    visit_ln(f, "head.ln", head_ln);
    visit_linear(f, "head", head);
    for (std::size_t l = 0; l < text_.size(); ++l) visit_gates(f, "text", l, text_[l].gates);
    for (std::size_t l = 0; l < fusion_.size(); ++l) visit_gates(f, "fusion", l, fusion_[l].gates);
    return out;
}

std::size_t Model::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : parameters()) n += t.numel();
    return n;
}

void Model::set_trainable(bool trainable) {
    for (auto& [name, t] : parameters()) {
        Tensor handle = t;
        handle.set_requires_grad(trainable);
        if (!trainable) handle.zero_grad();
    }
}

bool Model::operator==(const Model& other) const {
    auto a = parameters();
    auto b = other.parameters();
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].first != b[i].first || !bitwise_equal(a[i].second, b[i].second)) return false;
    }
    return to_string(config_.placement) == to_string(other.config_.placement) && config_.vocab == other.config_.vocab &&
           config_.gate_mode == other.config_.gate_mode && config_.subtract_mode == other.config_.subtract_mode;
}

// ---- forward ---------------------------------------------------------------------------

namespace {

Tensor norm(const LayerNormParams& ln, const Tensor& x) { return layer_norm(x, ln.gamma, ln.beta); }

} // namespace

Tensor Model::mlp(const LayerNormParams& ln, const Linear& fc1, const Linear& fc2, const Tensor& x) const {
    return add(x, apply(fc2, gelu(apply(fc1, norm(ln, x)))));
}

Tensor Model::encoder_block(const EncoderBlock& b, const Tensor& x, const std::vector<std::uint8_t>* keep) const {
    Tensor a = norm(b.ln_attn, x);
    Tensor h = add(x, multihead_attention(a, a, b.attn, keep));
    return mlp(b.ln_mlp, b.fc1, b.fc2, h);
}

std::vector<std::size_t> Model::token_ids(const TokenSequence& seq) const {
    if (seq.size() > config_.max_len) {
        fail(ErrorKind::TooLong, "sequence of " + std::to_string(seq.size()) + " tokens exceeds max_len " + std::to_string(config_.max_len));
    }
    if (seq.size() == 0) fail(ErrorKind::EmptyText, "empty token sequence");
    const std::size_t unk = vocab_index_.find("[UNK]")->second;
    std::vector<std::size_t> ids;
    ids.reserve(seq.size());
    for (const auto& tok : seq.tokens) {
        auto it = vocab_index_.find(tok);
        ids.push_back(it == vocab_index_.end() ? unk : it->second);
    }
    return ids;
}

Tensor Model::encode_image(const Tensor& pixels) const {
    const ModelConfig& c = config_;
    if (pixels.shape() != Shape{c.image_side, c.image_side, c.channels}) {
        fail(ErrorKind::ShapeMismatch, "image " + shape_string(pixels.shape()) + " does not match the model input");
    }
    for (Scalar v : pixels.data()) {
        if (!(v >= 0 && v <= 1)) fail(ErrorKind::RangeError, "pixel values must lie in [0,1]");
    }
    Tensor pp = patchify(pixels, c.patch);
    Tensor x = concat({vis_cls, apply(patch_embed, pp)}, 0);
    x = add(x, vis_pos);
    for (const auto& b : vision_) x = encoder_block(b, x, nullptr);
    return norm(vis_ln, x);
}

Tensor Model::encode_text(const TokenSequence& seq, const TokenMask& mask) const {
    const auto ids = token_ids(seq);
    if (mask.size() != seq.size()) fail(ErrorKind::LengthMismatch, "mask length differs from sequence length");
    Tensor x = add(embedding(tok_embed, ids), slice(txt_pos, 0, 0, ids.size()));
    for (const auto& b : text_) x = encoder_block(b, x, &mask.bits);
    return norm(txt_ln, x);
}

TextFeatures Model::encode_text(const TokenSequence& seq) const {
    const ModelConfig& c = config_;
    const bool need_function = !c.placement.empty();
    const bool text_site = need_function && c.placement.covers_text();
    if (!text_site) {
        TextFeatures f;
        f.text = encode_text(seq, all_tokens_mask(seq));
        if (need_function) f.function_text = encode_text(seq, function_word_mask(seq, dictionary_));
        return f;
    }
    // Two streams in lockstep: the function-word stream feeds the de-attention
    // of the full stream at placed text layers.
    const auto ids = token_ids(seq);
    const TokenMask fmask = function_word_mask(seq, dictionary_);
    Tensor x = add(embedding(tok_embed, ids), slice(txt_pos, 0, 0, ids.size()));
    Tensor xf = x;
    for (std::size_t l = 0; l < text_.size(); ++l) {
        const EncoderBlock& b = text_[l];
        const auto active = active_heads(c, l);
        Tensor a = norm(b.ln_attn, x);
        Tensor af = norm(b.ln_attn, xf);
        Tensor h = std::any_of(active.begin(), active.end(), [](std::uint8_t v) { return v != 0; })
                       ? fda_self_attention(a, af, b.attn, b.gates, active, c.subtract_mode)
                       : multihead_attention(a, a, b.attn);
        Tensor hf = multihead_attention(af, af, b.attn, &fmask.bits);
        x = mlp(b.ln_mlp, b.fc1, b.fc2, add(x, h));
        xf = mlp(b.ln_mlp, b.fc1, b.fc2, add(xf, hf));
    }
    return {norm(txt_ln, x), norm(txt_ln, xf)};
}

Tensor Model::score_features(const Tensor& visual, const TextFeatures& text) const {
    const ModelConfig& c = config_;
    const PlacementSpec fusion_placement = c.placement.covers_fusion() ? c.placement : PlacementSpec::none();
    Tensor t = text.text;
    for (std::size_t l = 0; l < fusion_.size(); ++l) {
        const FusionBlock& b = fusion_[l];
        Tensor a = norm(b.ln_self, t);
        t = add(t, multihead_attention(a, a, b.self_attn));
        Tensor q = norm(b.ln_cross, t);
        Tensor qf = fusion_placement.empty() ? Tensor() : norm(b.ln_cross, text.function_text);
        t = add(t, fda_multihead(q, qf, visual, b.cross, b.gates, fusion_placement, l, c.subtract_mode));
        t = mlp(b.ln_mlp, b.fc1, b.fc2, t);
    }
    Tensor cls = norm(head_ln, slice(t, 0, 0, 1));
    return reshape(apply(head, cls), {1});
}

Model::CrossInputs Model::cross_inputs(const Tensor& visual, const TokenSequence& seq, std::size_t layer) const {
    if (layer >= fusion_.size()) fail(ErrorKind::InvalidIndex, "fusion layer " + std::to_string(layer) + " out of range");
    const ModelConfig& c = config_;
    TextFeatures text = encode_text(seq);
    const Tensor function_text =
        text.function_text.defined() ? text.function_text : encode_text(seq, function_word_mask(seq, dictionary_));
    const PlacementSpec fusion_placement = c.placement.covers_fusion() ? c.placement : PlacementSpec::none();
    Tensor t = text.text;
    for (std::size_t l = 0;; ++l) {
        const FusionBlock& b = fusion_[l];
        Tensor a = norm(b.ln_self, t);
        t = add(t, multihead_attention(a, a, b.self_attn));
        Tensor q = norm(b.ln_cross, t);
        Tensor qf = norm(b.ln_cross, function_text);
        if (l == layer) return {q, qf, visual};
        t = add(t, fda_multihead(q, qf, visual, b.cross, b.gates, fusion_placement, l, c.subtract_mode));
        t = mlp(b.ln_mlp, b.fc1, b.fc2, t);
    }
}

Tensor Model::score(const Tensor& pixels, const TokenSequence& seq) const {
    return score_features(encode_image(pixels), encode_text(seq));
}

// ---- training ----------------------------------------------------------------------------

TrainReport train(Model& model, const std::vector<CorpusItem>& corpus, const TrainConfig& cfg) {
    std::vector<CorpusItem> items = select_split(corpus, Split::Train);
    if (items.empty()) items = corpus;
    if (items.empty()) fail(ErrorKind::EmptyCorpus, "cannot train on an empty corpus");
    if (cfg.batch_size == 0) fail(ErrorKind::InvalidConfig, "batch_size must be positive");

    const std::size_t max_len = model.config().max_len;
    std::vector<TokenSequence> seqs;
    for (const auto& it : items) seqs.push_back(it.tokens(max_len));

    TrainReport report;
    Rng rng(cfg.seed);
    std::vector<std::size_t> order(items.size());
    model.set_trainable(true);
    const auto params = model.parameters();
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
        Scalar epoch_sum = 0;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t b = std::min(cfg.batch_size, order.size() - start);
            const std::size_t shifts = std::min(cfg.negatives, b - 1);
            GradientTape tape;
            Tensor loss;
            {
                TapeScope scope(tape);
                std::vector<Tensor> visual;
                std::vector<TextFeatures> text;
                for (std::size_t i = 0; i < b; ++i) {
                    visual.push_back(model.encode_image(items[order[start + i]].image));
                    text.push_back(model.encode_text(seqs[order[start + i]]));
                }
                std::vector<Tensor> logits;
                std::vector<Scalar> labels;
                for (std::size_t s = 0; s <= shifts; ++s) {
                    for (std::size_t i = 0; i < b; ++i) {
                        logits.push_back(model.score_features(visual[i], text[(i + s) % b]));
                        labels.push_back(s == 0 ? 1 : 0);
                    }
                }
                loss = bce_with_logits(concat(logits, 0), labels);
            }
            tape.backward(loss);
            for (const auto& [name, p] : params) {
                if (!p.has_grad()) continue;
                Tensor handle = p;
                auto data = handle.mutable_data();
                auto grad = p.grad();
                for (std::size_t k = 0; k < data.size(); ++k) data[k] -= cfg.lr * grad[k];
                handle.zero_grad();
            }
            report.step_losses.push_back(loss.item());
            epoch_sum += loss.item();
            ++steps;
        }
        report.epoch_losses.push_back(epoch_sum / static_cast<Scalar>(steps));
    }
    model.set_trainable(false);
    return report;
}

// ---- retrieval ----------------------------------------------------------------------------

std::string_view to_string(Direction d) { return d == Direction::T2I ? "T2IR" : "I2TR"; }

ScoreMatrix score_matrix(const Model& model, const std::vector<CorpusItem>& items, std::size_t threads) {
    const std::size_t n = items.size();
    std::vector<Tensor> visual(n);
    std::vector<TextFeatures> text(n);
    ScoreMatrix s(n, std::vector<Scalar>(n));
    auto work = [&](std::size_t worker, std::size_t stride) {
        for (std::size_t i = worker; i < n; i += stride) {
            visual[i] = model.encode_image(items[i].image);
            text[i] = model.encode_text(items[i].tokens(model.config().max_len));
        }
    };
    auto fill = [&](std::size_t worker, std::size_t stride) {
        for (std::size_t i = worker; i < n; i += stride)
            for (std::size_t j = 0; j < n; ++j) s[i][j] = model.score_features(visual[i], text[j]).item();
    };
    threads = std::max<std::size_t>(1, std::min(threads, n));
    for (auto stage : {std::function<void(std::size_t, std::size_t)>(work), std::function<void(std::size_t, std::size_t)>(fill)}) {
        if (threads == 1) {
            stage(0, 1);
            continue;
        }
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(stage, w, threads);
        for (auto& t : pool) t.join();
    }
    return s;
}

std::size_t rank_of(const std::vector<Scalar>& scores, std::size_t target) {
    if (target >= scores.size()) fail(ErrorKind::InvalidIndex, "rank target out of range");
    std::size_t rank = 1;
    for (std::size_t j = 0; j < scores.size(); ++j) {
        if (scores[j] > scores[target] || (scores[j] == scores[target] && j < target)) ++rank;
    }
    return rank;
}

namespace {

std::vector<Scalar> query_scores(const ScoreMatrix& s, Direction d, std::size_t q) {
    if (d == Direction::I2T) return s[q];
    std::vector<Scalar> col(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) col[i] = s[i][q];
    return col;
}

} // namespace

std::vector<std::vector<std::size_t>> retrieve(const ScoreMatrix& scores, Direction d) {
    std::vector<std::vector<std::size_t>> out;
    const std::size_t queries = d == Direction::I2T ? scores.size() : (scores.empty() ? 0 : scores[0].size());
    for (std::size_t q = 0; q < queries; ++q) {
        auto s = query_scores(scores, d, q);
        std::vector<std::size_t> idx(s.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
        out.push_back(std::move(idx));
    }
    return out;
}

std::vector<std::vector<std::size_t>> retrieve(const Model& model, const std::vector<CorpusItem>& items, Direction d) {
    return retrieve(score_matrix(model, items), d);
}

double recall_at(const ScoreMatrix& scores, Direction d, std::size_t k) {
    if (scores.empty()) fail(ErrorKind::EmptyRanks, "recall over an empty gallery");
    std::size_t hits = 0;
    for (std::size_t q = 0; q < scores.size(); ++q) hits += rank_of(query_scores(scores, d, q), q) <= k ? 1 : 0;
    return 100.0 * static_cast<double>(hits) / static_cast<double>(scores.size());
}

// ---- checkpoints ----------------------------------------------------------------------------

namespace {

constexpr const char* kCheckpointMagic = "FDACKPT";
constexpr int kCheckpointVersion = 1;

nlohmann::ordered_json config_to_json(const ModelConfig& c, const FunctionWordDictionary& dict) {
    nlohmann::ordered_json j;
    j["image_side"] = c.image_side;
    j["channels"] = c.channels;
    j["patch"] = c.patch;
    j["heads"] = c.heads;
    j["head_dim"] = c.head_dim;
    j["mlp_hidden"] = c.mlp_hidden;
    j["max_len"] = c.max_len;
    j["text_layers"] = c.text_layers;
    j["fusion_layers"] = c.fusion_layers;
    j["vision_layers"] = c.vision_layers;
    j["placement"] = to_string(c.placement);
    j["site"] = std::string(to_string(c.placement.site));
    j["gate_mode"] = std::string(to_string(c.gate_mode));
    j["gate_value"] = c.gate_value;
    j["subtract_mode"] = std::string(to_string(c.subtract_mode));
    j["vocab"] = c.vocab;
    j["seed"] = c.seed;
    j["dictionary_source"] = dict.source();
    if (dict.source() != "builtin") j["dictionary"] = std::vector<std::string>(dict.entries().begin(), dict.entries().end());
    return j;
}

std::pair<ModelConfig, FunctionWordDictionary> config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.image_side = j.at("image_side").get<std::size_t>();
    c.channels = j.at("channels").get<std::size_t>();
    c.patch = j.at("patch").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.head_dim = j.at("head_dim").get<std::size_t>();
    c.mlp_hidden = j.at("mlp_hidden").get<std::size_t>();
    c.max_len = j.at("max_len").get<std::size_t>();
    c.text_layers = j.at("text_layers").get<std::size_t>();
    c.fusion_layers = j.at("fusion_layers").get<std::size_t>();
    c.vision_layers = j.at("vision_layers").get<std::size_t>();
    c.placement = parse_placement(j.at("placement").get<std::string>());
    c.placement.site = parse_encoder_site(j.at("site").get<std::string>());
    c.gate_mode = parse_gate_mode(j.at("gate_mode").get<std::string>());
    c.gate_value = j.at("gate_value").get<Scalar>();
    c.subtract_mode = parse_subtract_mode(j.at("subtract_mode").get<std::string>());
    c.vocab = j.at("vocab").get<std::vector<std::string>>();
    c.seed = j.at("seed").get<std::uint64_t>();
    const std::string source = j.at("dictionary_source").get<std::string>();
    FunctionWordDictionary dict = source == "builtin"
                                      ? FunctionWordDictionary::builtin()
                                      : FunctionWordDictionary::from_words(j.at("dictionary").get<std::vector<std::string>>(), source);
    return {c, dict};
}

} // namespace

void save_checkpoint(const Model& model, const std::string& path) {
    nlohmann::ordered_json manifest;
    manifest["format"] = kCheckpointMagic;
    manifest["version"] = kCheckpointVersion;
    manifest["config"] = config_to_json(model.config(), model.dictionary());
    std::string blob;
    nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
    for (const auto& [name, t] : model.parameters()) {
        std::string bytes = encode_ften(t);
        tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", blob.size()}, {"bytes", bytes.size()}});
        blob += bytes;
    }
    manifest["tensors"] = tensors;
    const std::string text = manifest.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::IoError, "cannot open " + path + " for writing");
    out << kCheckpointMagic << ' ' << kCheckpointVersion << ' ' << text.size() << '\n' << text << blob;
    if (!out) fail(ErrorKind::IoError, "write to " + path + " failed");
}

Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::IoError, "cannot open checkpoint " + path);
    std::string header;
    std::getline(in, header);
    std::istringstream hs(header);
    std::string magic;
    int version = 0;
    std::size_t manifest_bytes = 0;
    if (!(hs >> magic >> version >> manifest_bytes) || magic != kCheckpointMagic) fail(ErrorKind::FormatError, path + " is not a checkpoint");
    if (version != kCheckpointVersion) fail(ErrorKind::FormatError, "unsupported checkpoint version " + std::to_string(version));
    std::string text(manifest_bytes, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(manifest_bytes))) fail(ErrorKind::FormatError, "truncated checkpoint manifest");
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    try {
        const auto manifest = nlohmann::json::parse(text);
        auto [config, dict] = config_from_json(manifest.at("config"));
        Model model(config, dict);
        std::map<std::string, Tensor> loaded;
        for (const auto& entry : manifest.at("tensors")) {
            const auto offset = entry.at("offset").get<std::size_t>();
            const auto bytes = entry.at("bytes").get<std::size_t>();
            if (offset > blob.size() || bytes > blob.size() - offset) fail(ErrorKind::FormatError, "tensor block outside the checkpoint");
            Tensor t = decode_ften(blob.substr(offset, bytes));
            if (t.shape() != entry.at("shape").get<Shape>()) fail(ErrorKind::FormatError, "manifest shape disagrees with tensor block");
            loaded.emplace(entry.at("name").get<std::string>(), t);
        }
        const auto params = model.parameters();
        if (loaded.size() != params.size()) fail(ErrorKind::FormatError, "checkpoint tensor set does not match the model");
        for (const auto& [name, p] : params) {
            auto it = loaded.find(name);
            if (it == loaded.end()) fail(ErrorKind::FormatError, "checkpoint lacks tensor " + name);
            if (it->second.shape() != p.shape()) fail(ErrorKind::FormatError, "tensor " + name + " has shape " + shape_string(it->second.shape()));
            Tensor handle = p;
            auto dst = handle.mutable_data();
            auto src = it->second.data();
            std::copy(src.begin(), src.end(), dst.begin());
        }
        return model;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::FormatError, std::string("checkpoint manifest: ") + e.what());
    }
}

} // namespace fda
