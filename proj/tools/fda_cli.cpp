// Command-line front end: corpus generation, training, attacks, evaluation,
// placement sweeps and attention dumps.

#include "fda/attacks.hpp"
#include "fda/corpus.hpp"
#include "fda/error.hpp"
#include "fda/eval.hpp"
#include "fda/model.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

using namespace fda;
namespace fs = std::filesystem;

namespace {

struct KeyInfo {
    const char* name;
    const char* fallback;
    const char* help;
};

// Every key accepted in a config file. Command-line flags use the same names
// with '-' for '_' and win over the file.
const std::vector<KeyInfo> kKeys{
    {"seed", "0", "master seed"},
    {"threads", "1", "worker threads for scoring and attacks"},
    {"out", ".", "output directory"},
    {"corpus", "", "corpus file (default <out>/corpus.jsonl)"},
    {"n", "128", "corpus size"},
    {"train_ratio", "0.75", "fraction of items in the train split"},
    {"image_storage", "inline", "inline | external"},
    {"model", "", "checkpoint to load (default <out>/model.ckpt)"},
    {"placement", "none", "de-attention placement, e.g. L0-1,H0-3"},
    {"site", "fusion", "fusion | text | both"},
    {"gate_mode", "learnable", "learnable | fixed"},
    {"gate_value", "0", "fixed gate, or initial raw logit of learnable gates"},
    {"subtract_mode", "elementwise", "elementwise | row_branch"},
    {"heads", "8", "attention heads"},
    {"head_dim", "8", "width per head"},
    {"mlp_hidden", "128", "MLP hidden width"},
    {"max_len", "16", "caption length including [CLS]"},
    {"text_layers", "2", "text encoder layers"},
    {"fusion_layers", "2", "fusion encoder layers"},
    {"vision_layers", "1", "vision encoder layers"},
    {"dictionary", "builtin", "builtin, empty, or a word-list file"},
    {"epochs", "5", "training epochs"},
    {"lr", "0.05", "SGD learning rate"},
    {"batch_size", "2", "training batch size"},
    {"negatives", "1", "circular-shift negatives per batch"},
    {"split", "test", "split used by attack, eval, ablate and dump-attn"},
    {"item", "0", "item index within the split"},
    {"attack", "apgd", "pgd | apgd | mapgd"},
    {"epsilon", "2/255", "l-infinity radius"},
    {"steps", "", "attack iterations (default 10 for PGD, 100 otherwise)"},
    {"mode", "targeted", "targeted | untargeted"},
    {"random_start", "false", "PGD random start inside the ball"},
    {"baseline", "", "no-defense checkpoint for eval"},
    {"defenses", "", "label=checkpoint pairs separated by ';'"},
    {"attacks", "pgd,apgd,mapgd", "attack families for eval and ablate"},
    {"epsilons", "2/255,4/255", "radii for eval and ablate"},
    {"modes", "targeted", "attack modes for eval and ablate"},
    {"ks", "1,5", "recall cut-offs"},
    {"pgd_steps", "10", "PGD iterations in eval and ablate"},
    {"apgd_steps", "100", "APGD/MAPGD iterations in eval and ablate"},
    {"placements", "L0,H0-3;L0-1,H0-3;Lall,Hall", "placements swept by ablate, ';'-separated"},
    {"layer", "0", "fusion layer for dump-attn"},
    {"head", "0", "head for dump-attn"},
    {"stage", "full_fda", "original | one_subtraction | full_fda"},
};

class Settings {
public:
    void load_file(const std::string& path) {
        file_ = load_config_file(path);
        for (const auto& [k, v] : file_) {
            bool known = false;
            for (const auto& info : kKeys) known |= k == info.name;
            if (!known) fail(ErrorKind::InvalidConfig, "unknown config key '" + k + "'");
        }
    }
    void bind(CLI::App* app, const std::vector<std::string>& keys) {
        for (const auto& k : keys) {
            const KeyInfo* info = find(k);
            std::string flag = "--" + k;
            for (auto& c : flag) c = c == '_' ? '-' : c;
            bound_.push_back({k, app->add_option(flag, cli_[k], info->help)});
        }
    }
    void finalize() {
        for (const auto& [k, opt] : bound_)
            if (opt->count() > 0) given_[k] = cli_[k];
    }

    std::string str(const std::string& key) const {
        if (auto it = given_.find(key); it != given_.end()) return it->second;
        if (auto it = file_.find(key); it != file_.end()) return it->second;
        return find(key)->fallback;
    }
    bool has(const std::string& key) const { return !str(key).empty(); }
    std::uint64_t u64(const std::string& key) const {
        const std::string v = str(key);
        try {
            std::size_t used = 0;
            const auto x = std::stoull(v, &used);
            if (used == v.size() && v.find('-') == std::string::npos) return x;
        } catch (const std::exception&) {
        }
        fail(ErrorKind::InvalidConfig, key + " expects a non-negative integer, got '" + v + "'");
    }
    double real(const std::string& key) const {
        const std::string v = str(key);
        try {
            std::size_t used = 0;
            const double x = std::stod(v, &used);
            if (used == v.size()) return x;
        } catch (const std::exception&) {
        }
        fail(ErrorKind::InvalidConfig, key + " expects a number, got '" + v + "'");
    }
    bool flag(const std::string& key) const {
        const std::string v = str(key);
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        fail(ErrorKind::InvalidConfig, key + " expects true or false, got '" + v + "'");
    }
    std::vector<std::string> list(const std::string& key, char sep) const {
        std::vector<std::string> out;
        std::string cur;
        for (char c : str(key) + sep) {
            if (c == sep) {
                while (!cur.empty() && std::isspace(static_cast<unsigned char>(cur.back()))) cur.pop_back();
                std::size_t b = 0;
                while (b < cur.size() && std::isspace(static_cast<unsigned char>(cur[b]))) ++b;
                if (b < cur.size()) out.push_back(cur.substr(b));
                cur.clear();
            } else {
                cur += c;
            }
        }
        return out;
    }

    fs::path out() const { return str("out"); }
    std::string corpus_path() const { return has("corpus") ? str("corpus") : (out() / "corpus.jsonl").string(); }
    std::string model_path() const { return has("model") ? str("model") : (out() / "model.ckpt").string(); }

private:
    static const KeyInfo* find(const std::string& key) {
        for (const auto& info : kKeys)
            if (key == info.name) return &info;
        fail(ErrorKind::InvalidConfig, "unknown key '" + key + "'");
    }

    std::map<std::string, std::string> file_, cli_, given_;
    std::vector<std::pair<std::string, CLI::Option*>> bound_;
};

const std::vector<std::string> kModelKeys{"placement", "site", "gate_mode", "gate_value", "subtract_mode", "heads",
                                          "head_dim", "mlp_hidden", "max_len", "text_layers", "fusion_layers",
                                          "vision_layers", "dictionary"};
const std::vector<std::string> kTrainKeys{"corpus", "epochs", "lr", "batch_size", "negatives"};
const std::vector<std::string> kPlanKeys{"corpus", "split", "attacks", "epsilons", "modes", "ks", "pgd_steps", "apgd_steps"};

FunctionWordDictionary dictionary_from(const Settings& s) {
    const std::string d = s.str("dictionary");
    if (d == "builtin") return FunctionWordDictionary::builtin();
    if (d == "empty") return FunctionWordDictionary::empty();
    return FunctionWordDictionary::from_file(d);
}

ModelConfig model_config(const Settings& s, const std::string& placement) {
    ModelConfig c;
    c.seed = s.u64("seed");
    c.placement = parse_placement(placement);
    c.placement.site = parse_encoder_site(s.str("site"));
    c.gate_mode = parse_gate_mode(s.str("gate_mode"));
    c.gate_value = static_cast<Scalar>(s.real("gate_value"));
    c.subtract_mode = parse_subtract_mode(s.str("subtract_mode"));
    c.heads = s.u64("heads");
    c.head_dim = s.u64("head_dim");
    c.mlp_hidden = s.u64("mlp_hidden");
    c.max_len = s.u64("max_len");
    c.text_layers = s.u64("text_layers");
    c.fusion_layers = s.u64("fusion_layers");
    c.vision_layers = s.u64("vision_layers");
    return c;
}

TrainConfig train_config(const Settings& s) {
    TrainConfig t;
    t.epochs = s.u64("epochs");
    t.lr = static_cast<Scalar>(s.real("lr"));
    t.batch_size = s.u64("batch_size");
    t.negatives = s.u64("negatives");
    t.seed = s.u64("seed");
    return t;
}

std::vector<CorpusItem> split_items(const Settings& s) {
    const auto corpus = load_corpus(s.corpus_path());
    const std::string split = s.str("split");
    if (split == "all") return corpus;
    return select_split(corpus, parse_split(split));
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::IoError, "cannot open " + path.string() + " for writing");
    out << text;
}

ExperimentPlan plan_from(const Settings& s) {
    ExperimentPlan p;
    p.attacks.clear();
    for (const auto& a : s.list("attacks", ',')) p.attacks.push_back(parse_attack_family(a));
    p.epsilons.clear();
    for (const auto& e : s.list("epsilons", ',')) p.epsilons.push_back(parse_epsilon(e));
    p.modes.clear();
    for (const auto& m : s.list("modes", ',')) p.modes.push_back(parse_attack_mode(m));
    p.ks.clear();
    for (const auto& k : s.list("ks", ',')) p.ks.push_back(std::stoul(k));
    p.pgd_steps = s.u64("pgd_steps");
    p.apgd_steps = s.u64("apgd_steps");
    p.seed = s.u64("seed");
    p.threads = s.u64("threads");
    p.items = split_items(s);
    return p;
}

void print_table(const std::vector<MetricRecord>& records) { std::cout << report_table_csv(records); }

// ---- subcommands ------------------------------------------------------------------------

int cmd_gen_corpus(const Settings& s) {
    const auto items = generate(s.u64("seed"), s.u64("n"), s.real("train_ratio"));
    const std::string path = s.corpus_path();
    if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
    const std::string storage = s.str("image_storage");
    if (storage != "inline" && storage != "external") fail(ErrorKind::InvalidConfig, "image_storage must be inline or external");
    save_corpus(items, path, storage == "inline" ? ImageStorage::Inline : ImageStorage::External);
    std::cout << "wrote " << items.size() << " items to " << path << "\n";
    return 0;
}

int cmd_train(const Settings& s) {
    const auto corpus = load_corpus(s.corpus_path());
    Model model(model_config(s, s.str("placement")), dictionary_from(s));
    const TrainReport report = train(model, corpus, train_config(s));
    const std::string path = s.has("model") ? s.str("model") : (s.out() / "model.ckpt").string();
    fs::create_directories(s.out());
    save_checkpoint(model, path);

    nlohmann::ordered_json log;
    log["epoch_losses"] = report.epoch_losses;
    log["step_losses"] = report.step_losses;
    const auto test = select_split(corpus, Split::Test);
    if (test.size() >= 2) {
        const ScoreMatrix m = score_matrix(model, test, s.u64("threads"));
        for (Direction d : {Direction::T2I, Direction::I2T}) {
            log["test_r_at_1"][std::string(to_string(d))] = recall_at(m, d, 1);
            std::cout << to_string(d) << " test R@1 " << format_percent(recall_at(m, d, 1)) << "\n";
        }
    }
    write_text(s.out() / "train_log.json", log.dump(2) + "\n");
    for (std::size_t e = 0; e < report.epoch_losses.size(); ++e)
        std::cout << "epoch " << e + 1 << " loss " << report.epoch_losses[e] << "\n";
    std::cout << "saved " << path << "\n";
    return 0;
}

int cmd_attack(const Settings& s) {
    const Model model = load_checkpoint(s.model_path());
    const auto items = split_items(s);
    const std::size_t i = s.u64("item");
    if (i >= items.size()) fail(ErrorKind::InvalidIndex, "item " + std::to_string(i) + " outside the split");
    const std::size_t max_len = model.config().max_len;

    AttackConfig cfg = AttackConfig::defaults(parse_attack_family(s.str("attack")));
    cfg.epsilon = parse_epsilon(s.str("epsilon"));
    if (s.has("steps")) cfg.steps = s.u64("steps");
    cfg.mode = parse_attack_mode(s.str("mode"));
    cfg.seed = s.u64("seed") + i;
    cfg.random_start = s.flag("random_start");
    std::optional<TokenSequence> target;
    const std::size_t want = cfg.mode == AttackMode::Targeted ? (i + 1) % items.size() : i;
    if (cfg.mode == AttackMode::Targeted) target = items[want].tokens(max_len);

    AttackResult r = run_attack(model, items[i].image, items[i].tokens(max_len), target, model.dictionary(), cfg);
    std::vector<Scalar> row;
    const Tensor visual = model.encode_image(r.adv_image);
    for (const auto& it : items) row.push_back(model.score_features(visual, model.encode_text(it.tokens(max_len))).item());
    const std::size_t rank = rank_of(row, want);
    r.success = cfg.mode == AttackMode::Targeted ? rank == 1 : rank > 1;

    fs::create_directories(s.out());
    save_ften((s.out() / "adv.ften").string(), r.adv_image);
    nlohmann::ordered_json j;
    j["attack"] = std::string(to_string(cfg.family));
    j["mode"] = std::string(to_string(cfg.mode));
    j["epsilon"] = format_epsilon(cfg.epsilon);
    j["item"] = i;
    j["caption"] = items[i].caption;
    if (target) j["target_caption"] = items[want].caption;
    j["best_loss"] = r.best_loss;
    j["loss_trace"] = r.loss_trace;
    j["step_sizes"] = r.step_sizes;
    j["i2t_rank"] = rank;
    j["success"] = r.success;
    write_text(s.out() / "attack.json", j.dump(2) + "\n");
    std::cout << to_string(cfg.family) << " " << to_string(cfg.mode) << " eps " << format_epsilon(cfg.epsilon)
              << ": best loss " << r.best_loss << ", I2T rank " << rank << (r.success ? " (success)" : " (failed)") << "\n";
    return 0;
}

int cmd_eval(const Settings& s) {
    if (!s.has("baseline")) fail(ErrorKind::InvalidConfig, "eval needs baseline = <checkpoint>");
    std::vector<std::pair<std::string, Model>> models;
    models.emplace_back("No Defense", load_checkpoint(s.str("baseline")));
    for (const auto& entry : s.list("defenses", ';')) {
        const auto eq = entry.find('=');
        if (eq == std::string::npos) fail(ErrorKind::InvalidConfig, "defense '" + entry + "' is not label=checkpoint");
        models.emplace_back(entry.substr(0, eq), load_checkpoint(entry.substr(eq + 1)));
    }
    ExperimentPlan plan = plan_from(s);
    for (const auto& [label, m] : models) plan.defenses.push_back({label, &m});
    const auto records = run_experiment_to(plan, s.out().string());
    print_table(records);
    return 0;
}

int cmd_ablate(const Settings& s) {
    const auto corpus = load_corpus(s.corpus_path());
    const TrainConfig tc = train_config(s);
    const auto dict = dictionary_from(s);
    std::vector<std::pair<std::string, Model>> models;
    models.emplace_back("No Defense", Model(model_config(s, "none"), dict));
    for (const auto& p : s.list("placements", ';')) models.emplace_back(p, Model(model_config(s, p), dict));
    for (auto& [label, m] : models) {
        const auto report = train(m, corpus, tc);
        std::cout << "trained " << label << ": final loss " << report.epoch_losses.back() << "\n";
    }
    ExperimentPlan plan = plan_from(s);
    for (const auto& [label, m] : models) plan.defenses.push_back({label, &m});
    const auto records = run_experiment_to(plan, s.out().string());
    print_table(records);
    return 0;
}

int cmd_dump_attn(const Settings& s) {
    const Model model = load_checkpoint(s.model_path());
    const auto items = split_items(s);
    const std::size_t i = s.u64("item");
    if (i >= items.size()) fail(ErrorKind::InvalidIndex, "item " + std::to_string(i) + " outside the split");
    const HeatmapStage stage = parse_heatmap_stage(s.str("stage"));
    const std::size_t layer = s.u64("layer"), head = s.u64("head");
    fs::create_directories(s.out());
    const fs::path path = s.out() / ("attn_L" + std::to_string(layer) + "_H" + std::to_string(head) + "_" +
                                     std::string(to_string(stage)) + ".csv");
    const auto summary = dump_attention_heatmap(model, items[i].image, items[i].tokens(model.config().max_len), layer,
                                                head, stage, path.string());
    std::cout << "wrote " << path.string() << " (" << summary.row_sums.size() << " rows, min " << summary.min << ", max "
              << summary.max << ")\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Function-word de-attention toolkit"};
    app.require_subcommand(1);
    app.fallthrough();
    Settings settings;
    std::string config_path;
    app.add_option("--config", config_path, "flat key = value config file");
    settings.bind(&app, {"seed", "threads", "out"});

    struct Sub {
        const char* name;
        const char* help;
        std::vector<std::string> keys;
        int (*run)(const Settings&);
    };
    auto join = [](std::vector<std::vector<std::string>> parts) {
        std::vector<std::string> out;
        for (auto& p : parts)
            for (auto& k : p)
                if (std::find(out.begin(), out.end(), k) == out.end()) out.push_back(k);
        return out;
    };
    const std::vector<Sub> subs{
        {"gen-corpus", "generate a synthetic corpus", {"corpus", "n", "train_ratio", "image_storage"}, cmd_gen_corpus},
        {"train", "train a model on a corpus", join({kModelKeys, kTrainKeys, {"model"}}), cmd_train},
        {"attack", "attack one item",
         {"model", "corpus", "split", "item", "attack", "epsilon", "steps", "mode", "random_start"}, cmd_attack},
        {"eval", "run the attack grid over trained checkpoints", join({kPlanKeys, {"baseline", "defenses"}}), cmd_eval},
        {"ablate", "train and evaluate one model per placement", join({kModelKeys, kTrainKeys, kPlanKeys, {"placements"}}),
         cmd_ablate},
        {"dump-attn", "write a cross-attention heatmap", {"model", "corpus", "split", "item", "layer", "head", "stage"},
         cmd_dump_attn},
    };
    std::vector<std::pair<CLI::App*, const Sub*>> apps;
    for (const auto& sub : subs) {
        CLI::App* a = app.add_subcommand(sub.name, sub.help);
        settings.bind(a, sub.keys);
        apps.emplace_back(a, &sub);
    }

    CLI11_PARSE(app, argc, argv);
    try {
        if (!config_path.empty()) settings.load_file(config_path);
        settings.finalize();
        for (const auto& [a, sub] : apps)
            if (a->parsed()) return sub->run(settings);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
