#include "fda/eval.hpp"

#include "fda/error.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace fda {

using nlohmann::ordered_json;

// ---- metrics ----------------------------------------------------------------------------

double asr_targeted(const std::vector<std::size_t>& ranks, std::size_t k) {
    if (ranks.empty()) fail(ErrorKind::EmptyRanks, "no ranks to score");
    const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](std::size_t r) { return r <= k; });
    return 100.0 * static_cast<double>(hits) / static_cast<double>(ranks.size());
}

double asr_untargeted(double clean_recall, double adversarial_recall) {
    for (double v : {clean_recall, adversarial_recall}) {
        if (!(v >= 0 && v <= 100)) fail(ErrorKind::RangeError, "recall must lie in [0,100]");
    }
    const double drop = clean_recall - adversarial_recall;
    if (drop < 0) {
        warn("AsrFloored", "adversarial recall " + format_percent(adversarial_recall) + " exceeds clean recall " +
                               format_percent(clean_recall) + "; ASR floored at 0");
        return 0;
    }
    return drop;
}

double asr_untargeted_complement(double adversarial_recall) {
    if (!(adversarial_recall >= 0 && adversarial_recall <= 100)) fail(ErrorKind::RangeError, "recall must lie in [0,100]");
    return 100 - adversarial_recall;
}

std::optional<double> delta_asr(double asr_baseline, double asr_method) {
    if (!(asr_baseline > 0)) return std::nullopt;
    return (asr_baseline - asr_method) / asr_baseline * 100;
}

std::string format_percent(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    std::string s(buf);
    return s == "-0.00" ? "0.00" : s;
}

// ---- experiments --------------------------------------------------------------------------

void ExperimentPlan::validate() const {
    if (defenses.empty()) fail(ErrorKind::InvalidConfig, "plan needs a no-defense leg");
    for (const auto& d : defenses)
        if (!d.model) fail(ErrorKind::InvalidConfig, "defense '" + d.label + "' has no model");
    if (items.size() < 2) fail(ErrorKind::InvalidConfig, "evaluation needs at least two items");
    if (attacks.empty() || epsilons.empty() || modes.empty()) fail(ErrorKind::InvalidConfig, "plan has no attacks");
    if (ks.empty()) fail(ErrorKind::InvalidConfig, "plan has no k values");
    for (std::size_t k : ks)
        if (k == 0) fail(ErrorKind::InvalidConfig, "k must be positive");
    for (Scalar e : epsilons)
        if (!(e >= 0)) fail(ErrorKind::RangeError, "epsilon must be non-negative");
    if (pgd_steps == 0 || apgd_steps == 0) fail(ErrorKind::ZeroSteps, "attack needs at least one step");
}

std::string ExperimentPlan::describe() const {
    std::ostringstream out;
    out << "seed=" << seed << "\n";
    for (const auto& d : defenses) {
        const ModelConfig& c = d.model->config();
        out << "defense=" << d.label << " placement=" << to_string(c.placement) << " site=" << to_string(c.placement.site)
            << " gate_mode=" << to_string(c.gate_mode) << " gate_value=" << format_epsilon(c.gate_value)
            << " model_seed=" << c.seed << "\n";
    }
    out << "items=" << items.size();
    for (const auto& it : items) out << " " << it.id;
    out << "\nattacks=";
    for (auto a : attacks) out << to_string(a) << " ";
    out << "\nepsilons=";
    for (auto e : epsilons) out << format_epsilon(e) << " ";
    out << "\nmodes=";
    for (auto m : modes) out << to_string(m) << " ";
    out << "\nks=";
    for (auto k : ks) out << k << " ";
    out << "\npgd_steps=" << pgd_steps << " apgd_steps=" << apgd_steps << "\n";
    return out.str();
}

namespace {

// Runs fn(i) for i in [0, n) on up to `threads` workers; the first error is rethrown.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += threads) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// Per item: the attacked image's scores against every caption.
using AdvRows = std::vector<std::vector<Scalar>>;

AdvRows attack_all(const Model& model, const std::vector<CorpusItem>& items, const std::vector<TokenSequence>& seqs,
                   const std::vector<TokenSequence>& targets, const std::vector<TextFeatures>& text, AttackConfig cfg,
                   std::uint64_t seed, std::size_t threads) {
    const std::size_t n = items.size();
    AdvRows rows(n, std::vector<Scalar>(n));
    parallel_for(n, threads, [&](std::size_t i) {
        AttackConfig c = cfg;
        c.seed = seed + i;
        std::optional<TokenSequence> target;
        if (c.mode == AttackMode::Targeted) target = targets[i];
        AttackResult r = run_attack(model, items[i].image, seqs[i], target, model.dictionary(), c);
        const Tensor visual = model.encode_image(r.adv_image);
        for (std::size_t j = 0; j < n; ++j) rows[i][j] = model.score_features(visual, text[j]).item();
    });
    return rows;
}

// Rank of image `image` for caption `caption` when that image is replaced by its attacked version.
std::size_t t2i_rank(const ScoreMatrix& clean, const AdvRows& adv, std::size_t image, std::size_t caption) {
    std::vector<Scalar> column(clean.size());
    for (std::size_t g = 0; g < clean.size(); ++g) column[g] = g == image ? adv[image][caption] : clean[g][caption];
    return rank_of(column, image);
}

double mean_of(const std::map<std::size_t, double>& m) {
    double s = 0;
    for (const auto& [k, v] : m) s += v;
    return s / static_cast<double>(m.size());
}

} // namespace

std::vector<MetricRecord> run_experiment(const ExperimentPlan& plan) {
    plan.validate();
    const std::size_t n = plan.items.size();
    std::vector<MetricRecord> records;

    for (const auto& leg : plan.defenses) {
        const Model& model = *leg.model;
        const std::size_t max_len = model.config().max_len;
        std::vector<TokenSequence> seqs;
        for (const auto& it : plan.items) seqs.push_back(it.tokens(max_len));
        const std::vector<TokenSequence> targets = circular_shift_targets(seqs);
        std::vector<TextFeatures> text(n);
        parallel_for(n, plan.threads, [&](std::size_t j) { text[j] = model.encode_text(seqs[j]); });

        const ScoreMatrix clean = score_matrix(model, plan.items, plan.threads);
        std::map<Direction, std::map<std::size_t, double>> clean_r;
        for (Direction d : {Direction::T2I, Direction::I2T})
            for (std::size_t k : plan.ks) clean_r[d][k] = recall_at(clean, d, k);

        for (Scalar eps : plan.epsilons) {
            for (AttackMode mode : plan.modes) {
                for (AttackFamily family : plan.attacks) {
                    AttackConfig cfg = AttackConfig::defaults(family);
                    cfg.epsilon = eps;
                    cfg.mode = mode;
                    cfg.steps = family == AttackFamily::PGD ? plan.pgd_steps : plan.apgd_steps;
                    const AdvRows adv = attack_all(model, plan.items, seqs, targets, text, cfg, plan.seed, plan.threads);

                    for (Direction d : {Direction::T2I, Direction::I2T}) {
                        MetricRecord rec;
                        rec.task = d;
                        rec.defense = leg.label;
                        rec.attack = family;
                        rec.mode = mode;
                        rec.epsilon = eps;
                        rec.clean_r_at = clean_r[d];
                        rec.baseline = plan.defenses.front().label;
                        std::vector<std::size_t> ranks(n);
                        for (std::size_t i = 0; i < n; ++i) {
                            // Targeted: where the attacked item lands for the target caption.
                            // Untargeted: where it lands for its own caption.
                            const std::size_t want = mode == AttackMode::Targeted ? (i + 1) % n : i;
                            ranks[i] = d == Direction::T2I ? t2i_rank(clean, adv, i, want) : rank_of(adv[i], want);
                        }
                        for (std::size_t k : plan.ks) {
                            if (mode == AttackMode::Targeted) {
                                rec.asr_at[k] = asr_targeted(ranks, k);
                            } else {
                                const double adv_recall = asr_targeted(ranks, k);
                                rec.adv_r_at[k] = adv_recall;
                                rec.complement_at[k] = asr_untargeted_complement(adv_recall);
                                rec.asr_at[k] = asr_untargeted(rec.clean_r_at[k], adv_recall);
                            }
                        }
                        rec.asr_avg = mean_of(rec.asr_at);
                        records.push_back(std::move(rec));
                    }
                }
            }
        }
    }

    // Delta against the matching no-defense record.
    for (auto& rec : records) {
        for (const auto& base : records) {
            if (base.defense == rec.baseline && base.task == rec.task && base.attack == rec.attack &&
                base.mode == rec.mode && base.epsilon == rec.epsilon) {
                rec.delta_asr = delta_asr(base.asr_avg, rec.asr_avg);
                break;
            }
        }
    }
    return records;
}

std::string fnv1a_hex(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

namespace {

ordered_json percent_map(const std::map<std::size_t, double>& m, bool formatted) {
    ordered_json j = ordered_json::object();
    for (const auto& [k, v] : m) {
        if (formatted)
            j[std::to_string(k)] = format_percent(v);
        else
            j[std::to_string(k)] = v;
    }
    return j;
}

} // namespace

std::string report_json(const std::vector<MetricRecord>& records, const ReportMeta& meta) {
    ordered_json doc;
    doc["meta"] = {{"seed", meta.seed}, {"config_hash", meta.config_hash}, {"status", meta.complete ? "complete" : "failed"}};
    if (!meta.complete) doc["meta"]["failure"] = meta.failure;
    doc["records"] = ordered_json::array();
    for (const auto& r : records) {
        ordered_json j;
        j["task"] = std::string(to_string(r.task));
        j["defense"] = r.defense;
        j["attack"] = std::string(to_string(r.attack));
        j["mode"] = std::string(to_string(r.mode));
        j["epsilon"] = r.epsilon;
        j["epsilon_label"] = format_epsilon(r.epsilon);
        j["clean_r_at"] = percent_map(r.clean_r_at, false);
        j["clean_r_at_fmt"] = percent_map(r.clean_r_at, true);
        j["asr_at"] = percent_map(r.asr_at, false);
        j["asr_at_fmt"] = percent_map(r.asr_at, true);
        j["asr_avg"] = r.asr_avg;
        j["asr_avg_fmt"] = format_percent(r.asr_avg);
        j["baseline"] = r.baseline;
        if (r.delta_asr) {
            j["delta_asr"] = *r.delta_asr;
            j["delta_asr_fmt"] = format_percent(*r.delta_asr);
        } else {
            j["delta_asr"] = nullptr;
            j["delta_asr_fmt"] = nullptr;
        }
        if (r.mode == AttackMode::Untargeted) {
            j["adv_r_at"] = percent_map(r.adv_r_at, false);
            j["complement_at"] = percent_map(r.complement_at, false);
            j["complement_at_fmt"] = percent_map(r.complement_at, true);
        }
        doc["records"].push_back(std::move(j));
    }
    return doc.dump(2) + "\n";
}

std::string report_table_csv(const std::vector<MetricRecord>& records) {
    const std::vector<AttackFamily> families{AttackFamily::PGD, AttackFamily::APGD, AttackFamily::MAPGD};
    std::ostringstream out;
    out << "epsilon,mode,defense";
    for (const char* task : {"t2ir", "i2tr"}) {
        out << "," << task << "_clean_r1";
        for (auto f : families) {
            std::string name(to_string(f));
            std::transform(name.begin(), name.end(), name.begin(), [](unsigned char c) { return std::tolower(c); });
            out << "," << task << "_" << name;
        }
    }
    out << ",delta_asr\n";

    // Row order follows the first appearance of (epsilon, mode, defense).
    struct Key {
        Scalar eps;
        AttackMode mode;
        std::string defense;
    };
    std::vector<Key> rows;
    for (const auto& r : records) {
        bool seen = false;
        for (const auto& k : rows) seen |= k.eps == r.epsilon && k.mode == r.mode && k.defense == r.defense;
        if (!seen) rows.push_back({r.epsilon, r.mode, r.defense});
    }
    // Rows sorted by epsilon then mode, keeping defense order.
    std::stable_sort(rows.begin(), rows.end(), [](const Key& a, const Key& b) {
        return a.eps < b.eps || (a.eps == b.eps && a.mode < b.mode);
    });

    for (const auto& key : rows) {
        out << format_epsilon(key.eps) << "," << to_string(key.mode) << "," << key.defense;
        std::vector<double> deltas;
        bool is_baseline = false;
        for (Direction d : {Direction::T2I, Direction::I2T}) {
            std::string clean = "";
            std::vector<std::string> cells;
            for (auto f : families) {
                std::string cell;
                for (const auto& r : records) {
                    if (r.epsilon == key.eps && r.mode == key.mode && r.defense == key.defense && r.task == d && r.attack == f) {
                        cell = format_percent(r.asr_avg);
                        auto it = r.clean_r_at.find(1);
                        if (it != r.clean_r_at.end()) clean = format_percent(it->second);
                        is_baseline = r.defense == r.baseline;
                        if (r.delta_asr) deltas.push_back(*r.delta_asr);
                    }
                }
                cells.push_back(cell);
            }
            out << "," << clean;
            for (const auto& c : cells) out << "," << c;
        }
        if (is_baseline)
            out << ",-";
        else if (deltas.empty())
            out << ",";
        else
            out << "," << format_percent(std::accumulate(deltas.begin(), deltas.end(), 0.0) / static_cast<double>(deltas.size()));
        out << "\n";
    }
    return out.str();
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::IoError, "cannot open " + path.string() + " for writing");
    out << text;
    if (!out) fail(ErrorKind::IoError, "write to " + path.string() + " failed");
}

} // namespace

std::vector<MetricRecord> run_experiment_to(const ExperimentPlan& plan, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    ReportMeta meta;
    meta.seed = plan.seed;
    std::vector<MetricRecord> records;
    try {
        plan.validate();
        meta.config_hash = fnv1a_hex(plan.describe());
        // Legs run one at a time so a failure keeps the finished ones.
        for (std::size_t leg = 0; leg < plan.defenses.size(); ++leg) {
            ExperimentPlan one = plan;
            one.defenses = {plan.defenses[leg]};
            auto part = run_experiment(one);
            records.insert(records.end(), part.begin(), part.end());
        }
        for (auto& rec : records) {
            rec.baseline = plan.defenses.front().label;
            rec.delta_asr.reset();
            for (const auto& base : records) {
                if (base.defense == rec.baseline && base.task == rec.task && base.attack == rec.attack &&
                    base.mode == rec.mode && base.epsilon == rec.epsilon) {
                    rec.delta_asr = delta_asr(base.asr_avg, rec.asr_avg);
                    break;
                }
            }
        }
    } catch (const std::exception& e) {
        meta.complete = false;
        meta.failure = e.what();
        write_text(fs::path(out_dir) / "report.json", report_json(records, meta));
        write_text(fs::path(out_dir) / "table.csv", report_table_csv(records));
        throw;
    }
    write_text(fs::path(out_dir) / "report.json", report_json(records, meta));
    write_text(fs::path(out_dir) / "table.csv", report_table_csv(records));
    return records;
}

// ---- heatmaps -------------------------------------------------------------------------------

Tensor attention_heatmap(const Model& model, const Tensor& image, const TokenSequence& seq, std::size_t layer,
                         std::size_t head, HeatmapStage stage) {
    const ModelConfig& c = model.config();
    if (layer >= c.fusion_layers) fail(ErrorKind::InvalidIndex, "fusion layer " + std::to_string(layer) + " out of range");
    if (head >= c.heads) fail(ErrorKind::InvalidIndex, "head " + std::to_string(head) + " out of range");
    const auto inputs = model.cross_inputs(model.encode_image(image), seq, layer);
    const FusionBlock& block = model.fusion()[layer];
    const bool placed = c.placement.covers_fusion() && c.placement.active(layer, head);
    const Scalar gate = placed ? block.gates[head].value() : Scalar{0};
    return attention_probabilities(inputs.text, inputs.function_text, inputs.visual, block.cross, head, gate, stage);
}

HeatmapSummary dump_attention_heatmap(const Model& model, const Tensor& image, const TokenSequence& seq,
                                      std::size_t layer, std::size_t head, HeatmapStage stage, const std::string& path) {
    const Tensor m = attention_heatmap(model, image, seq, layer, head, stage);
    const std::size_t rows = m.dim(0), cols = m.dim(1);
    HeatmapSummary s;
    s.min = m.data()[0];
    s.max = m.data()[0];
    std::ostringstream csv;
    csv.precision(17);
    csv << "token";
    for (std::size_t j = 0; j < cols; ++j) csv << ",v" << j;
    csv << "\n";
    for (std::size_t i = 0; i < rows; ++i) {
        csv << seq.tokens[i];
        double sum = 0;
        for (std::size_t j = 0; j < cols; ++j) {
            const double v = m.data()[i * cols + j];
            csv << "," << v;
            sum += v;
            s.min = std::min(s.min, v);
            s.max = std::max(s.max, v);
        }
        csv << "\n";
        s.row_sums.push_back(sum);
    }
    write_text(path, csv.str());

    ordered_json j;
    j["layer"] = layer;
    j["head"] = head;
    j["stage"] = std::string(to_string(stage));
    j["rows"] = rows;
    j["cols"] = cols;
    j["row_sums"] = s.row_sums;
    j["min"] = s.min;
    j["max"] = s.max;
    write_text(path + ".summary.json", j.dump(2) + "\n");
    return s;
}

// ---- config files ---------------------------------------------------------------------------

std::map<std::string, std::string> parse_config_text(std::string_view text) {
    auto trim = [](std::string_view s) {
        while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
        while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
        return s;
    };
    std::map<std::string, std::string> out;
    std::size_t line_no = 0;
    while (!text.empty()) {
        ++line_no;
        const auto nl = text.find('\n');
        std::string_view line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos)
            fail(ErrorKind::InvalidConfig, "line " + std::to_string(line_no) + ": expected 'key = value'");
        const std::string key(trim(line.substr(0, eq)));
        const std::string value(trim(line.substr(eq + 1)));
        if (key.empty()) fail(ErrorKind::InvalidConfig, "line " + std::to_string(line_no) + ": empty key");
        if (!out.emplace(key, value).second)
            fail(ErrorKind::InvalidConfig, "line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
    return out;
}

std::map<std::string, std::string> load_config_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::IoError, "cannot open config " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

} // namespace fda
