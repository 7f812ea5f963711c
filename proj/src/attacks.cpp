#include "fda/attacks.hpp"

#include "fda/error.hpp"
#include "fda/rng.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <sstream>

namespace fda {

std::string_view to_string(AttackFamily f) {
    switch (f) {
    case AttackFamily::PGD: return "PGD";
    case AttackFamily::APGD: return "APGD";
    case AttackFamily::MAPGD: return "MAPGD";
    }
    return "PGD";
}

AttackFamily parse_attack_family(std::string_view name) {
    std::string upper(name);
    for (auto& c : upper) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    for (auto f : {AttackFamily::PGD, AttackFamily::APGD, AttackFamily::MAPGD})
        if (to_string(f) == upper) return f;
    fail(ErrorKind::ParseError, "unknown attack '" + std::string(name) + "'");
}

std::string_view to_string(AttackMode m) { return m == AttackMode::Targeted ? "targeted" : "untargeted"; }

AttackMode parse_attack_mode(std::string_view name) {
    if (name == "targeted") return AttackMode::Targeted;
    if (name == "untargeted") return AttackMode::Untargeted;
    fail(ErrorKind::ParseError, "unknown attack mode '" + std::string(name) + "'");
}

namespace {

double parse_number(std::string_view s, std::string_view whole) {
    std::string text(s);
    std::size_t used = 0;
    double v = 0;
    try {
        v = std::stod(text, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (text.empty() || used != text.size() || !std::isfinite(v)) {
        fail(ErrorKind::ParseError, "bad epsilon '" + std::string(whole) + "'");
    }
    return v;
}

} // namespace

Scalar parse_epsilon(std::string_view text) {
    while (!text.empty() && std::isspace(static_cast<unsigned char>(text.front()))) text.remove_prefix(1);
    while (!text.empty() && std::isspace(static_cast<unsigned char>(text.back()))) text.remove_suffix(1);
    double v = 0;
    auto slash = text.find('/');
    if (slash == std::string_view::npos) {
        v = parse_number(text, text);
    } else {
        const double num = parse_number(text.substr(0, slash), text);
        const double den = parse_number(text.substr(slash + 1), text);
        if (den == 0) fail(ErrorKind::ParseError, "zero denominator in epsilon '" + std::string(text) + "'");
        v = num / den;
    }
    if (v < 0) fail(ErrorKind::RangeError, "epsilon must be non-negative");
    return static_cast<Scalar>(v);
}

std::string format_epsilon(Scalar eps) {
    const double k = static_cast<double>(eps) * 255.0;
    const double r = std::round(k);
    if (std::abs(k - r) < 1e-9) return std::to_string(static_cast<long long>(r)) + "/255";
    std::ostringstream out;
    out.precision(9);
    out << static_cast<double>(eps);
    return out.str();
}

AttackConfig AttackConfig::defaults(AttackFamily family) {
    AttackConfig c;
    c.family = family;
    c.steps = family == AttackFamily::PGD ? 10 : 100;
    return c;
}

void AttackConfig::validate() const {
    if (!(epsilon >= 0) || !std::isfinite(epsilon)) fail(ErrorKind::RangeError, "epsilon must be non-negative");
    if (steps == 0) fail(ErrorKind::ZeroSteps, "attack needs at least one step");
    if (!(rho > 0 && rho < 1)) fail(ErrorKind::InvalidConfig, "rho must lie in (0,1)");
    if (!(momentum >= 0 && momentum <= 1)) fail(ErrorKind::InvalidConfig, "momentum must lie in [0,1]");
    if (step_size && !(*step_size >= 0)) fail(ErrorKind::InvalidConfig, "step size must be non-negative");
}

Scalar project(Scalar v, Scalar x0, Scalar eps) {
    Scalar hi = x0 + eps;
    while (hi - x0 > eps) hi = std::nextafter(hi, -std::numeric_limits<Scalar>::infinity());
    Scalar lo = x0 - eps;
    while (x0 - lo > eps) lo = std::nextafter(lo, std::numeric_limits<Scalar>::infinity());
    v = std::clamp(v, lo, hi);
    return std::clamp(v, Scalar{0}, Scalar{1});
}

namespace {

using Buffer = std::vector<Scalar>;

// Attacker objective with cached text features.
class Objective {
public:
    Objective(const Model& model, const Tensor& image, const TokenSequence& seq, const std::optional<TokenSequence>& target,
              const AttackConfig& cfg)
        : model_(model), shape_(image.shape()) {
        cfg.validate();
        if (cfg.mode == AttackMode::Targeted && !target) fail(ErrorKind::MissingTarget, "targeted attack needs a target caption");
        if (cfg.mode == AttackMode::Untargeted && target) fail(ErrorKind::InvalidConfig, "untargeted attack takes no target");
        text_ = model.encode_text(cfg.mode == AttackMode::Targeted ? *target : seq);
        sign_ = cfg.mode == AttackMode::Targeted ? Scalar{1} : Scalar{-1};
    }

    Scalar operator()(const Buffer& x, Buffer& grad) const {
        Tensor pixels(shape_, x, true);
        GradientTape tape;
        Tensor loss;
        {
            TapeScope scope(tape);
            loss = scale(model_.score_features(model_.encode_image(pixels), text_), sign_);
        }
        tape.backward(loss);
        auto g = pixels.grad();
        grad.assign(g.begin(), g.end());
        return loss.item();
    }

    const Shape& shape() const { return shape_; }

private:
    const Model& model_;
    Shape shape_;
    TextFeatures text_;
    Scalar sign_ = 1;
};

Scalar sign_of(Scalar g) { return g > 0 ? Scalar{1} : (g < 0 ? Scalar{-1} : Scalar{0}); }

void project_into(Buffer& x, const Buffer& x0, Scalar eps) {
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = project(x[i], x0[i], eps);
}

void notify(const IterateHook& hook, const Buffer& x, const Shape& shape) {
    if (hook) hook(Tensor(shape, x));
}

Buffer start_point(const Buffer& x0, const AttackConfig& cfg) {
    Buffer x = x0;
    if (cfg.random_start && cfg.epsilon > 0) {
        Rng rng(cfg.seed);
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = project(x0[i] + static_cast<Scalar>(rng.uniform(-1, 1)) * cfg.epsilon, x0[i], cfg.epsilon);
    }
    return x;
}

} // namespace

AttackResult pgd(const Model& model, const Tensor& image, const TokenSequence& seq,
                 const std::optional<TokenSequence>& target, const AttackConfig& cfg, const IterateHook& hook) {
    Objective f(model, image, seq, target, cfg);
    const Buffer x0(image.data().begin(), image.data().end());
    const Scalar alpha = cfg.pgd_step();
    Buffer x = start_point(x0, cfg);
    Buffer grad;
    AttackResult r;
    notify(hook, x, f.shape());
    Scalar loss = f(x, grad);
    Buffer best = x;
    r.best_loss = loss;
    r.loss_trace.push_back(loss);
    for (std::size_t t = 0; t < cfg.steps; ++t) {
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += alpha * sign_of(grad[i]);
        project_into(x, x0, cfg.epsilon);
        notify(hook, x, f.shape());
        loss = f(x, grad);
        r.loss_trace.push_back(loss);
        r.step_sizes.push_back(alpha);
        if (loss > r.best_loss) {
            r.best_loss = loss;
            best = x;
        }
    }
    r.adv_image = Tensor(f.shape(), std::move(best));
    return r;
}

AttackResult apgd(const Model& model, const Tensor& image, const TokenSequence& seq,
                  const std::optional<TokenSequence>& target, const AttackConfig& cfg, const IterateHook& hook) {
    Objective f(model, image, seq, target, cfg);
    const std::size_t n = cfg.steps;
    const std::size_t n_iter_2 = std::max<std::size_t>(static_cast<std::size_t>(0.22 * static_cast<double>(n)), 1);
    const std::size_t n_iter_min = std::max<std::size_t>(static_cast<std::size_t>(0.06 * static_cast<double>(n)), 1);
    const std::size_t size_decr = std::max<std::size_t>(static_cast<std::size_t>(0.03 * static_cast<double>(n)), 1);

    const Buffer x0(image.data().begin(), image.data().end());
    Buffer x = start_point(x0, cfg);
    Buffer grad;
    AttackResult r;
    notify(hook, x, f.shape());
    Scalar loss = f(x, grad);
    r.loss_trace.push_back(loss);

    Buffer x_best = x, grad_best = grad;
    Scalar loss_best = loss;
    Scalar step = 2 * cfg.epsilon;
    Buffer x_old = x;
    std::size_t k = n_iter_2;
    std::size_t counter = 0;
    bool reduced_last_check = true;
    Scalar loss_best_last_check = loss_best;
    Buffer z(x.size());

    for (std::size_t it = 0; it < n; ++it) {
        const Scalar a = it == 0 ? Scalar{1} : static_cast<Scalar>(cfg.momentum);
        for (std::size_t i = 0; i < x.size(); ++i) z[i] = x[i] + step * sign_of(grad[i]);
        project_into(z, x0, cfg.epsilon);
        notify(hook, z, f.shape());
        for (std::size_t i = 0; i < x.size(); ++i) {
            const Scalar momentum_term = x[i] - x_old[i];
            x_old[i] = x[i];
            z[i] = x[i] + (z[i] - x[i]) * a + momentum_term * (1 - a);
        }
        project_into(z, x0, cfg.epsilon);
        x = z;
        notify(hook, x, f.shape());
        loss = f(x, grad);
        r.loss_trace.push_back(loss);
        r.step_sizes.push_back(step);
        if (loss > loss_best) {
            loss_best = loss;
            x_best = x;
            grad_best = grad;
        }

        if (++counter == k) {
            // Fraction of improving steps since the last checkpoint. The trace
            // holds the clean loss at index 0, so the oldest comparison of the
            // first window is against the starting point.
            const std::size_t j = it + 1;
            std::size_t increases = 0;
            for (std::size_t c = 0; c < k && c < j; ++c) increases += r.loss_trace[j - c] > r.loss_trace[j - c - 1] ? 1 : 0;
            const bool oscillating = static_cast<double>(increases) <= static_cast<double>(k) * cfg.rho;
            const bool stagnant = !reduced_last_check && loss_best_last_check >= loss_best;
            const bool halve = oscillating || stagnant;
            reduced_last_check = halve;
            loss_best_last_check = loss_best;
            if (halve) {
                step /= 2;
                x = x_best;
                grad = grad_best;
            }
            counter = 0;
            k = std::max(k > size_decr ? k - size_decr : 0, n_iter_min);
        }
    }
    r.best_loss = loss_best;
    r.adv_image = Tensor(f.shape(), std::move(x_best));
    return r;
}

AttackResult mapgd(const Model& model, const Tensor& image, const TokenSequence& seq,
                   const std::optional<TokenSequence>& target, const FunctionWordDictionary& dict,
                   const AttackConfig& cfg, const IterateHook& hook) {
    std::optional<TokenSequence> masked_target;
    if (target) masked_target = remove_dictionary_words(*target, dict);
    return apgd(model, image, remove_dictionary_words(seq, dict), masked_target, cfg, hook);
}

AttackResult run_attack(const Model& model, const Tensor& image, const TokenSequence& seq,
                        const std::optional<TokenSequence>& target, const FunctionWordDictionary& dict,
                        const AttackConfig& cfg, const IterateHook& hook) {
    switch (cfg.family) {
    case AttackFamily::PGD: return pgd(model, image, seq, target, cfg, hook);
    case AttackFamily::APGD: return apgd(model, image, seq, target, cfg, hook);
    case AttackFamily::MAPGD: return mapgd(model, image, seq, target, dict, cfg, hook);
    }
    fail(ErrorKind::InvalidConfig, "unknown attack family");
}

std::vector<TokenSequence> circular_shift_targets(const std::vector<TokenSequence>& batch) {
    if (batch.size() < 2) {
        warn("SingletonBatch", "circular shift of a batch of " + std::to_string(batch.size()) + " would target the caption itself");
        fail(ErrorKind::SingletonBatch, "circular-shift targets need at least two captions");
    }
    std::vector<TokenSequence> out;
    out.reserve(batch.size());
    std::size_t duplicates = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        out.push_back(batch[(i + 1) % batch.size()]);
        if (out.back().tokens == batch[i].tokens) ++duplicates;
    }
    if (duplicates > 0) warn("DuplicateTarget", std::to_string(duplicates) + " target(s) equal their own caption");
    return out;
}

} // namespace fda
