#pragma once

#include "fda/attacks.hpp"
#include "fda/corpus.hpp"
#include "fda/model.hpp"

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fda {

// ---- metrics --------------------------------------------------------------------------

// 100 * |{r <= k}| / N over 1-based ranks. Throws EmptyRanks.
double asr_targeted(const std::vector<std::size_t>& ranks, std::size_t k);
// Drop in recall, floored at 0 with an "AsrFloored" warning. Inputs must lie in [0,100].
double asr_untargeted(double clean_recall, double adversarial_recall);
// 100 - adversarial recall, the other reading of untargeted success.
double asr_untargeted_complement(double adversarial_recall);
// (baseline - method) / baseline * 100; nullopt when the baseline is not positive.
std::optional<double> delta_asr(double asr_baseline, double asr_method);

// ---- experiments ----------------------------------------------------------------------

struct MetricRecord {
    Direction task = Direction::T2I;
    std::string defense;
    AttackFamily attack = AttackFamily::PGD;
    AttackMode mode = AttackMode::Targeted;
    Scalar epsilon = 0;
    std::map<std::size_t, double> clean_r_at;
    std::map<std::size_t, double> asr_at;
    double asr_avg = 0;
    std::optional<double> delta_asr;
    std::string baseline;  // defense label delta_asr refers to
    // Untargeted only: recall after the attack and its complement.
    std::map<std::size_t, double> adv_r_at;
    std::map<std::size_t, double> complement_at;

    bool operator==(const MetricRecord&) const = default;
};

struct DefenseLeg {
    std::string label;
    const Model* model = nullptr;
};

struct ExperimentPlan {
    std::vector<DefenseLeg> defenses;  // defenses[0] is the no-defense baseline
    std::vector<CorpusItem> items;     // evaluation gallery, usually the test split
    std::vector<AttackFamily> attacks{AttackFamily::PGD, AttackFamily::APGD, AttackFamily::MAPGD};
    std::vector<Scalar> epsilons{Scalar{2} / 255, Scalar{4} / 255};
    std::vector<AttackMode> modes{AttackMode::Targeted};
    std::vector<std::size_t> ks{1, 5};
    std::size_t pgd_steps = 10;
    std::size_t apgd_steps = 100;
    std::uint64_t seed = 0;
    std::size_t threads = 1;

    // Throws InvalidConfig.
    void validate() const;
    // Canonical text of every setting that affects the records.
    std::string describe() const;
};

// One record per (defense, attack, epsilon, mode, task). Item i is attacked
// with seed plan.seed + i; targeted attacks aim at caption (i + 1) mod n and
// the same adversarial image serves both retrieval directions.
std::vector<MetricRecord> run_experiment(const ExperimentPlan& plan);

struct ReportMeta {
    std::uint64_t seed = 0;
    std::string config_hash;
    bool complete = true;
    std::string failure;
};

std::string fnv1a_hex(std::string_view text);

// {meta{seed, config_hash, status}, records[...]}; every percentage appears
// raw and as a two-decimal string.
std::string report_json(const std::vector<MetricRecord>& records, const ReportMeta& meta);
// One row per (epsilon, defense, mode) with the clean R@1 and per-attack ASR
// of both directions, and the mean per-cell delta against the baseline.
std::string report_table_csv(const std::vector<MetricRecord>& records);

// Runs the plan and writes <out_dir>/report.json and <out_dir>/table.csv.
// On failure the records finished so far are written with status "failed"
// before the error is rethrown.
std::vector<MetricRecord> run_experiment_to(const ExperimentPlan& plan, const std::string& out_dir);

std::string format_percent(double v);

// ---- attention heatmaps ---------------------------------------------------------------

struct HeatmapSummary {
    std::vector<double> row_sums;
    double min = 0;
    double max = 0;
};

// Writes the [n_t x n_v] cross-attention matrix of one fusion head as CSV and
// a summary to <path>.summary.json. Throws InvalidIndex.
HeatmapSummary dump_attention_heatmap(const Model& model, const Tensor& image, const TokenSequence& seq,
                                      std::size_t layer, std::size_t head, HeatmapStage stage, const std::string& path);
Tensor attention_heatmap(const Model& model, const Tensor& image, const TokenSequence& seq, std::size_t layer,
                         std::size_t head, HeatmapStage stage);

// ---- config files ---------------------------------------------------------------------

// Flat "key = value" lines; '#' starts a comment. Throws InvalidConfig on a
// malformed line or a repeated key.
std::map<std::string, std::string> parse_config_text(std::string_view text);
std::map<std::string, std::string> load_config_file(const std::string& path);

} // namespace fda
