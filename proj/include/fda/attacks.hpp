#pragma once

#include "fda/model.hpp"
#include "fda/tensor.hpp"
#include "fda/textproc.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace fda {

enum class AttackFamily { PGD, APGD, MAPGD };
enum class AttackMode { Targeted, Untargeted };

std::string_view to_string(AttackFamily f);
AttackFamily parse_attack_family(std::string_view name);
std::string_view to_string(AttackMode m);
AttackMode parse_attack_mode(std::string_view name);

// "2/255" or a plain decimal. Negative radii are a RangeError.
Scalar parse_epsilon(std::string_view text);
// Inverse for reports: "2/255" when the value is an exact multiple of 1/255.
std::string format_epsilon(Scalar eps);

struct AttackConfig {
    AttackFamily family = AttackFamily::PGD;
    Scalar epsilon = Scalar{2} / 255;
    std::size_t steps = 10;
    std::optional<Scalar> step_size;  // PGD only; defaults to epsilon / 4
    double rho = 0.75;
    double momentum = 0.75;
    AttackMode mode = AttackMode::Untargeted;
    std::uint64_t seed = 0;
    bool random_start = false;

    // PGD: 10 steps. APGD and MAPGD: 100 steps.
    static AttackConfig defaults(AttackFamily family);
    void validate() const;
    Scalar pgd_step() const { return step_size ? *step_size : epsilon / 4; }
};

struct AttackResult {
    Tensor adv_image;
    Scalar best_loss = 0;
    std::vector<Scalar> loss_trace;  // loss of every evaluated iterate, clean image first
    std::vector<Scalar> step_sizes;  // per iteration
    bool success = false;            // filled by the evaluation harness
};

// Called with every projected iterate; used to check the constraints.
using IterateHook = std::function<void(const Tensor& iterate)>;

// Attacker loss (ascended): untargeted -score(x, seq), targeted score(x, target).
AttackResult pgd(const Model& model, const Tensor& image, const TokenSequence& seq,
                 const std::optional<TokenSequence>& target, const AttackConfig& cfg, const IterateHook& hook = {});
AttackResult apgd(const Model& model, const Tensor& image, const TokenSequence& seq,
                  const std::optional<TokenSequence>& target, const AttackConfig& cfg, const IterateHook& hook = {});
// APGD whose loss sees seq and target with dictionary words removed.
AttackResult mapgd(const Model& model, const Tensor& image, const TokenSequence& seq,
                   const std::optional<TokenSequence>& target, const FunctionWordDictionary& dict,
                   const AttackConfig& cfg, const IterateHook& hook = {});

// Dispatch on cfg.family.
AttackResult run_attack(const Model& model, const Tensor& image, const TokenSequence& seq,
                        const std::optional<TokenSequence>& target, const FunctionWordDictionary& dict,
                        const AttackConfig& cfg, const IterateHook& hook = {});

// Clamp v into [x0 - eps, x0 + eps] ∩ [0, 1] such that |v - x0| <= eps holds
// exactly in floating point.
Scalar project(Scalar v, Scalar x0, Scalar eps);

// target[i] = seq[(i + 1) mod n]. Throws SingletonBatch for n < 2 and warns
// DuplicateTarget when a target equals its own caption.
std::vector<TokenSequence> circular_shift_targets(const std::vector<TokenSequence>& batch);

} // namespace fda
