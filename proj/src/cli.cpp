#include "aeslab/cli.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

namespace aeslab {

namespace fs = std::filesystem;

json RunManifest::to_json() const {
    return json{{"command", command},
                {"version", version},
                {"config_path", config_path},
                {"config_hash", hash_hex(config_hash)},
                {"seed", seed},
                {"started_at", started_at},
                {"finished_at", finished_at},
                {"ok", ok},
                {"artifacts", artifacts},
                {"extra", extra}};
}

RunManifest RunManifest::from_json(const json& j) {
    RunManifest m;
    m.command = j.at("command").get<std::string>();
    m.version = j.at("version").get<std::string>();
    m.config_path = j.value("config_path", "");
    m.config_hash = std::stoull(j.at("config_hash").get<std::string>(), nullptr, 16);
    m.seed = j.at("seed").get<std::uint64_t>();
    m.started_at = j.value("started_at", "");
    m.finished_at = j.value("finished_at", "");
    m.ok = j.at("ok").get<bool>();
    m.artifacts = j.at("artifacts").get<std::vector<std::string>>();
    m.extra = j.value("extra", json::object());
    return m;
}

std::uint64_t manifest_fingerprint(const json& manifest) {
    json j = manifest;
    j.erase("started_at");
    j.erase("finished_at");
    return json_hash(j);
}

std::string utc_timestamp() {
    std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string variant_slug(const std::string& variant) {
    std::string s = variant;
    std::replace(s.begin(), s.end(), ':', '-');
    std::replace(s.begin(), s.end(), ',', '_');
    return s;
}

namespace {

struct CliState {
    ExperimentConfig cfg;
    std::string out_dir = "runs";
    std::string config_path;
    std::string qt_mode_name = "prompt-pooled";
};

std::string trimmed(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

// Flat key=value config with [section] headers; a sectioned key k becomes
// the option --section.k. Returned as option tokens so the command line,
// parsed afterwards, wins on conflicts.
std::vector<std::string> config_tokens(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config file not readable: " + path.string());
    std::vector<std::string> tokens;
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = trimmed(line);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        if (line.front() == '[' && line.back() == ']') {
            section = trimmed(line.substr(1, line.size() - 2));
            continue;
        }
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                                     ": expected key=value");
        std::string key = trimmed(line.substr(0, eq));
        std::string val = trimmed(line.substr(eq + 1));
        if (val.size() >= 2 && (val.front() == '"' || val.front() == '\'') &&
            val.back() == val.front())
            val = val.substr(1, val.size() - 2);
        if (key.empty())
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                                     ": empty key");
        tokens.push_back("--" + (section.empty() ? key : section + "." + key) + "=" + val);
    }
    return tokens;
}

// The config file must be located before CLI11 parses, so scan argv by hand.
std::string find_config_path(const std::vector<std::string>& args) {
    std::string path;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size())
            path = args[i + 1];
        else if (args[i].rfind("--config=", 0) == 0)
            path = args[i].substr(9);
    }
    return path;
}

std::string fold_label(int fold) {
    return fold < 0 ? "all" : "fold" + std::to_string(fold);
}

RunManifest start_manifest(const std::string& command, const CliState& st) {
    RunManifest m;
    m.command = command;
    m.config_path = st.config_path;
    if (!st.config_path.empty()) m.config_hash = fnv1a64(read_file(st.config_path));
    m.seed = st.cfg.seed;
    m.started_at = utc_timestamp();
    return m;
}

void finish_manifest(RunManifest& m, const fs::path& out_dir) {
    m.finished_at = utc_timestamp();
    fs::create_directories(out_dir);
    atomic_write_file(out_dir / ("manifest." + m.command + ".json"), m.to_json().dump(2) + "\n");
}

void note(RunManifest& m, const fs::path& p) { m.artifacts.push_back(p.string()); }

// 0 means "size from the data": vocab from the token table, encoder length
// from the longest essay in the corpus.
void fit_model_config(ModelConfig& mc, const Corpus& corpus, const Vocabulary& vocab) {
    if (mc.vocab_size <= 0) mc.vocab_size = vocab.size();
    int longest = 1;
    for (const EssayRecord& e : corpus.essays)
        longest = std::max(longest, static_cast<int>(e.tokens.size()));
    if (mc.max_enc_len <= 0) mc.max_enc_len = longest;
    if (longest > mc.max_enc_len)
        throw std::invalid_argument("max_enc_len " + std::to_string(mc.max_enc_len) +
                                    " is shorter than the longest essay (" +
                                    std::to_string(longest) + " tokens); use 0 to auto-size");
}

std::vector<const EssayRecord*> select_essays(const Corpus& corpus, int fold) {
    if (fold >= 0) return essays_in_fold(corpus, fold);
    std::vector<const EssayRecord*> all;
    all.reserve(corpus.essays.size());
    for (const EssayRecord& e : corpus.essays) all.push_back(&e);
    return all;
}

int worker_count_from_env() {
    const char* raw = std::getenv("AESLAB_WORKERS");
    if (!raw || !*raw) return 1;
    int n = std::atoi(raw);
    return n < 1 ? 1 : n;
}

// ---------------------------------------------------------------------------
// Commands. Each returns the process exit code and writes its manifest even
// when it fails partway.

int cmd_gen_corpus(CliState& st) {
    RunManifest m = start_manifest("gen-corpus", st);
    const fs::path out = st.out_dir;
    fs::create_directories(out);

    Schema schema = load_prompt_schema();
    Corpus corpus = generate_corpus(schema, st.cfg.corpus);
    make_folds(corpus, st.cfg.folds, derive_seed(st.cfg.seed, "folds"));

    fs::path corpus_path = out / "corpus.jsonl";
    save_corpus(corpus, corpus_path);
    note(m, corpus_path);
    note(m, out / "corpus.schema.json");

    m.extra = json{{"essays", corpus.essays.size()},
                   {"folds", st.cfg.folds},
                   {"split_hash", hash_hex(fold_split_hash(corpus))},
                   {"schema_hash", hash_hex(schema_hash(schema))}};
    finish_manifest(m, out);
    std::cerr << "gen-corpus: " << corpus.essays.size() << " essays across "
              << schema.prompts.size() << " prompts, " << st.cfg.folds << " folds -> "
              << corpus_path.string() << "\n";
    return 0;
}

int cmd_pretrain(CliState& st, std::string corpus_path, int fold) {
    RunManifest m = start_manifest("pretrain", st);
    const fs::path out = st.out_dir;
    if (corpus_path.empty()) corpus_path = (out / "corpus.jsonl").string();

    Corpus corpus = load_corpus(corpus_path);
    Vocabulary vocab = build_vocab(corpus.schema);
    PretrainConfig pc = st.cfg.pretrain;
    fit_model_config(pc.model, corpus, vocab);
    pc.validate();
    if (fold >= 0 && essays_in_fold(corpus, fold).empty())
        std::cerr << "pretrain: warning: fold " << fold << " holds no essays\n";

    PretrainResult r = supervised_train(corpus, vocab, pc, fold);
    for (const json& row : r.curve) std::cerr << "pretrain: " << row.dump() << "\n";

    CheckpointMeta meta;
    meta.schema_hash = schema_hash(corpus.schema);
    meta.vocab_hash = vocab.content_hash();
    meta.hyperparams = json{{"command", "pretrain"},   {"fold", fold},
                            {"pretrain", pc.to_json()}, {"best_dev_ce", r.best_dev_ce},
                            {"steps", r.steps_taken},   {"train_size", r.train_size},
                            {"dev_size", r.dev_size}};

    fs::create_directories(out);
    const std::string label = fold_label(fold);
    fs::path ckpt = out / ("pretrain." + label + ".ckpt.json");
    fs::path curve = out / ("pretrain." + label + ".curve.jsonl");
    save_checkpoint(ckpt.string(), r.model, meta);
    write_jsonl(curve, r.curve);
    note(m, ckpt);
    note(m, curve);

    m.extra = json{{"fold", fold},
                   {"best_dev_ce", r.best_dev_ce},
                   {"steps", r.steps_taken},
                   {"train_size", r.train_size},
                   {"dev_size", r.dev_size}};
    finish_manifest(m, out);
    std::cerr << "pretrain: fold " << fold << " done, dev ce " << r.best_dev_ce << " after "
              << r.steps_taken << " steps -> " << ckpt.string() << "\n";
    return 0;
}

int cmd_train(CliState& st, std::string corpus_path, std::string ckpt_path, int fold,
              const std::string& variant) {
    RunManifest m = start_manifest("train", st);
    const fs::path out = st.out_dir;
    if (corpus_path.empty()) corpus_path = (out / "corpus.jsonl").string();
    if (ckpt_path.empty())
        ckpt_path = (out / ("pretrain." + fold_label(fold) + ".ckpt.json")).string();

    TrainerConfig tc = st.cfg.trainer;
    tc.validate();
    if (variant == "baseline")
        throw std::invalid_argument(
            "the baseline skips RL; evaluate the pretrained checkpoint instead");
    resolve_variant(variant, tc); // rejects unknown variants before any work

    Corpus corpus = load_corpus(corpus_path);
    Vocabulary vocab = build_vocab(corpus.schema);
    Model policy =
        load_checkpoint(ckpt_path, schema_hash(corpus.schema), vocab.content_hash(), nullptr);
    Model anchor = clone_frozen(policy);

    fs::create_directories(out);
    const std::string stem = "train." + variant_slug(variant) + "." + fold_label(fold);
    CheckpointMeta meta;
    meta.schema_hash = schema_hash(corpus.schema);
    meta.vocab_hash = vocab.content_hash();

    CheckpointFn periodic = nullptr;
    if (tc.checkpoint_every > 0) {
        periodic = [&](int update, const Model& model, const std::vector<json>& log) {
            CheckpointMeta pm = meta;
            pm.hyperparams = json{{"command", "train"},
                                  {"variant", variant},
                                  {"fold", fold},
                                  {"update", update},
                                  {"trainer", tc.to_json()}};
            fs::path p = out / (stem + ".u" + std::to_string(update) + ".ckpt.json");
            save_checkpoint(p.string(), model, pm);
            write_jsonl(out / (stem + ".log.jsonl"), log);
            note(m, p);
        };
    }

    RlResult rl = train_rl(policy, anchor, corpus, vocab, tc, variant, fold, periodic);
    auto [wq, wm] = rl.weights.normalized();

    meta.hyperparams = json{{"command", "train"},    {"variant", variant},
                            {"fold", fold},          {"trainer", tc.to_json()},
                            {"w_q", wq},             {"w_m", wm},
                            {"aborted", rl.aborted}, {"skipped_total", rl.skipped_total}};
    fs::path ckpt = out / (stem + ".ckpt.json");
    fs::path log = out / (stem + ".log.jsonl");
    save_checkpoint(ckpt.string(), rl.policy, meta);
    write_jsonl(log, rl.log);
    note(m, ckpt);
    note(m, log);

    m.extra = json{{"variant", variant},   {"fold", fold},
                   {"updates", tc.updates}, {"w_q", wq},
                   {"w_m", wm},             {"aborted", rl.aborted},
                   {"skipped_total", rl.skipped_total}};
    finish_manifest(m, out);
    std::cerr << "train: " << variant << " " << fold_label(fold) << " finished, w_q=" << wq
              << " w_m=" << wm << (rl.aborted ? " (aborted on non-finite losses)" : "") << " -> "
              << ckpt.string() << "\n";
    return 0;
}

int cmd_eval(CliState& st, std::string corpus_path, std::string ckpt_path, int fold,
             bool gold_self_test) {
    RunManifest m = start_manifest("eval", st);
    const fs::path out = st.out_dir;
    if (corpus_path.empty()) corpus_path = (out / "corpus.jsonl").string();

    Corpus corpus = load_corpus(corpus_path);
    Vocabulary vocab = build_vocab(corpus.schema);
    std::vector<const EssayRecord*> essays = select_essays(corpus, fold);
    if (essays.empty())
        throw std::invalid_argument("no essays selected (fold " + std::to_string(fold) + ")");

    EvaluationReport rep;
    std::string label, row_name;
    if (gold_self_test) {
        label = "gold." + fold_label(fold);
        row_name = "gold";
        std::vector<EvalSample> samples;
        samples.reserve(essays.size());
        for (const EssayRecord* e : essays)
            samples.push_back(EvalSample{e->prompt_id, e->gold, e->gold, true});
        rep = evaluate_report(samples, corpus.schema);
    } else {
        if (ckpt_path.empty())
            ckpt_path = (out / ("pretrain." + fold_label(fold) + ".ckpt.json")).string();
        label = fold_label(fold);
        row_name = fs::path(ckpt_path).filename().string();
        Model model =
            load_checkpoint(ckpt_path, schema_hash(corpus.schema), vocab.content_hash(), nullptr);
        rep = evaluate_policy(model, corpus.schema, vocab, essays); // always greedy
    }

    fs::create_directories(out);
    fs::path rj = out / ("eval." + label + ".report.json");
    fs::path tc = out / ("eval." + label + ".traits.csv");
    fs::path pc = out / ("eval." + label + ".prompts.csv");
    atomic_write_file(rj, report_to_json(rep).dump(2) + "\n");
    atomic_write_file(tc, report_trait_csv({{row_name, rep}}));
    atomic_write_file(pc, report_prompt_csv({{row_name, rep}}));
    note(m, rj);
    note(m, tc);
    note(m, pc);

    m.extra = json{{"fold", fold},
                   {"gold_self_test", gold_self_test},
                   {"checkpoint", gold_self_test ? "" : ckpt_path},
                   {"average_qwk", rep.average_qwk},
                   {"parse_failure_rate", rep.parse_failure_rate},
                   {"samples", rep.sample_count}};
    finish_manifest(m, out);
    std::cerr << "eval: " << label << " avg kappa " << rep.average_qwk << ", parse failures "
              << rep.parse_failure_rate << " over " << rep.sample_count << " essays -> "
              << rj.string() << "\n";
    return 0;
}

// One grid variant end to end; shared by the sequential and worker paths so
// both produce byte-identical report files.
void run_grid_variant(const ExperimentConfig& base, const Corpus& corpus,
                      const Vocabulary& vocab, const std::vector<FoldModels>& pretrains,
                      const std::string& variant, const fs::path& report_path,
                      const fs::path& done_path) {
    ExperimentConfig cfg = base;
    cfg.variant = variant;
    AggregateReport rep = run_cross_validation(cfg, corpus, vocab, &pretrains);
    atomic_write_file(report_path, rep.to_json().dump(2) + "\n");
    atomic_write_file(done_path, variant + " ok\n");
}

int cmd_ablate(CliState& st) {
    RunManifest m = start_manifest("ablate", st);
    const fs::path out = st.out_dir;
    const fs::path adir = out / "ablate";
    bool all_ok = true;
    std::vector<std::string> failed;

    try {
        fs::create_directories(adir);
        Schema schema = load_prompt_schema();
        Corpus corpus = generate_corpus(schema, st.cfg.corpus);
        make_folds(corpus, st.cfg.folds, derive_seed(st.cfg.seed, "folds"));
        Vocabulary vocab = build_vocab(corpus.schema);
        fit_model_config(st.cfg.pretrain.model, corpus, vocab);
        st.cfg.validate();

        std::vector<FoldModels> pretrains;
        for (int f = 0; f < st.cfg.folds; ++f) {
            pretrains.push_back(pretrain_fold(st.cfg, corpus, vocab, f));
            std::cerr << "ablate: pretrained fold " << f << ", dev ce "
                      << pretrains.back().dev_ce << "\n";
        }

        const std::vector<std::string>& variants = ablation_variants();
        auto report_path = [&](const std::string& v) {
            return adir / (variant_slug(v) + ".report.json");
        };
        auto done_path = [&](const std::string& v) { return adir / (variant_slug(v) + ".done"); };

        const int workers = worker_count_from_env();
        if (workers <= 1) {
            for (const std::string& v : variants) {
                try {
                    run_grid_variant(st.cfg, corpus, vocab, pretrains, v, report_path(v),
                                     done_path(v));
                    std::cerr << "ablate: finished " << v << "\n";
                } catch (const std::exception& e) {
                    std::cerr << "ablate: warning: variant " << v << " failed: " << e.what()
                              << "\n";
                    failed.push_back(v);
                }
            }
        } else {
            // One child process per variant, at most `workers` in flight,
            // coordinated by the .done completion files.
            std::cerr << "ablate: running " << variants.size() << " variants with " << workers
                      << " workers\n";
            std::deque<std::string> queue(variants.begin(), variants.end());
            std::map<pid_t, std::string> running;
            std::fflush(nullptr);
            while (!queue.empty() || !running.empty()) {
                while (!queue.empty() && static_cast<int>(running.size()) < workers) {
                    std::string v = queue.front();
                    queue.pop_front();
                    pid_t pid = fork();
                    if (pid < 0) throw std::runtime_error("fork failed");
                    if (pid == 0) {
                        int rc = 0;
                        try {
                            run_grid_variant(st.cfg, corpus, vocab, pretrains, v, report_path(v),
                                             done_path(v));
                        } catch (const std::exception& e) {
                            std::cerr << "ablate: worker " << v << " failed: " << e.what()
                                      << "\n";
                            rc = 1;
                        }
                        std::fflush(nullptr);
                        _exit(rc);
                    }
                    running.emplace(pid, std::move(v));
                }
                int status = 0;
                pid_t done = waitpid(-1, &status, 0);
                if (done < 0) throw std::runtime_error("waitpid failed");
                auto it = running.find(done);
                if (it == running.end()) continue;
                std::string v = it->second;
                running.erase(it);
                bool child_ok = WIFEXITED(status) && WEXITSTATUS(status) == 0 &&
                                fs::exists(done_path(v)) && fs::exists(report_path(v));
                if (child_ok)
                    std::cerr << "ablate: finished " << v << "\n";
                else {
                    std::cerr << "ablate: warning: variant " << v << " failed\n";
                    failed.push_back(v);
                }
            }
        }

        GridResult grid;
        grid.split_hash = fold_split_hash(corpus);
        for (const std::string& v : variants) {
            if (!fs::exists(report_path(v)) || !fs::exists(done_path(v))) {
                if (std::find(failed.begin(), failed.end(), v) == failed.end())
                    failed.push_back(v);
                continue;
            }
            grid.variant_order.push_back(v);
            grid.reports[v] = AggregateReport::from_json(json::parse(read_file(report_path(v))));
            note(m, report_path(v));
        }
        all_ok = failed.empty();

        if (!grid.variant_order.empty()) {
            fs::path tcsv = adir / "traits.csv";
            fs::path pcsv = adir / "prompts.csv";
            atomic_write_file(tcsv, grid_trait_csv(grid));
            atomic_write_file(pcsv, grid_prompt_csv(grid));
            note(m, tcsv);
            note(m, pcsv);
            if (grid.reports.count("baseline")) {
                fs::path ccsv = adir / "comparison.csv";
                atomic_write_file(ccsv, grid_comparison_csv(grid, "baseline"));
                note(m, ccsv);
            }
        }
        m.extra = json{{"variants", grid.variant_order},
                       {"failed", failed},
                       {"split_hash", hash_hex(grid.split_hash)},
                       {"workers", workers}};
    } catch (const std::exception& e) {
        all_ok = false;
        m.extra["error"] = e.what();
        std::cerr << "ablate: error: " << e.what() << "\n";
    }

    m.ok = all_ok;
    finish_manifest(m, out); // written even on partial failure
    return all_ok ? 0 : 1;
}

int cmd_report(CliState& st, const std::vector<std::string>& files,
               const std::string& baseline) {
    RunManifest m = start_manifest("report", st);
    const fs::path out = st.out_dir;

    GridResult grid;
    for (const std::string& f : files) {
        AggregateReport rep = AggregateReport::from_json(json::parse(read_file(f)));
        if (grid.reports.count(rep.variant)) {
            std::cerr << "report: warning: duplicate variant " << rep.variant
                      << ", keeping the last\n";
        } else {
            grid.variant_order.push_back(rep.variant);
        }
        if (grid.variant_order.size() == 1 && grid.reports.empty())
            grid.split_hash = rep.split_hash;
        else if (rep.split_hash != grid.split_hash)
            std::cerr << "report: warning: " << rep.variant
                      << " was evaluated on a different fold split\n";
        grid.reports[rep.variant] = std::move(rep);
    }
    if (grid.variant_order.empty()) throw std::invalid_argument("no reports given");

    fs::create_directories(out);
    fs::path tcsv = out / "report.traits.csv";
    fs::path pcsv = out / "report.prompts.csv";
    atomic_write_file(tcsv, grid_trait_csv(grid));
    atomic_write_file(pcsv, grid_prompt_csv(grid));
    note(m, tcsv);
    note(m, pcsv);
    if (grid.reports.count(baseline)) {
        fs::path ccsv = out / "report.comparison.csv";
        atomic_write_file(ccsv, grid_comparison_csv(grid, baseline));
        note(m, ccsv);
    } else {
        std::cerr << "report: baseline variant '" << baseline
                  << "' not among the inputs; skipping the comparison table\n";
    }

    m.extra = json{{"inputs", files}, {"baseline", baseline}};
    finish_manifest(m, out);
    std::cerr << "report: rendered " << grid.variant_order.size() << " variants -> "
              << tcsv.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

void add_config_options(CLI::App& app, CliState& st) {
    // Config-file tokens are injected ahead of the command line, so every
    // one of these takes the last value given: flags beat the file.
    auto opt = [&app](const std::string& name, auto& var, const std::string& help) {
        return app.add_option(name, var, help)
            ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast)
            ->capture_default_str();
    };

    opt("--seed", st.cfg.seed, "root experiment seed (drives the fold split)");
    opt("--out", st.out_dir, "output directory");
    opt("--folds", st.cfg.folds, "cross-validation folds");
    opt("--variant", st.cfg.variant,
        "default RL variant (samrl-biq, samrl-uniqt, samrl-uniqb, sasrl-m, sasrl-q, "
        "fixed:WQ,WM)");

    CorpusConfig& cc = st.cfg.corpus;
    opt("--corpus.seed", cc.seed, "corpus generator seed");
    opt("--corpus.essays_per_prompt", cc.essays_per_prompt, "essays per prompt");
    opt("--corpus.body_len_min", cc.body_len_min, "shortest essay body");
    opt("--corpus.body_len_max", cc.body_len_max, "longest essay body");
    opt("--corpus.noise_sigma", cc.noise_sigma,
        "gold-score jitter as a fraction of the trait range");
    opt("--corpus.vocab_size_body", cc.vocab_size_body, "distinct filler words in essay bodies");

    PretrainConfig& pc = st.cfg.pretrain;
    opt("--pretrain.epochs", pc.epochs, "supervised epoch ceiling");
    opt("--pretrain.batch_size", pc.batch_size, "supervised batch size");
    opt("--pretrain.lr", pc.lr, "supervised learning rate");
    opt("--pretrain.patience", pc.patience,
        "dev evaluations without improvement before stopping");
    opt("--pretrain.eval_interval", pc.eval_interval, "optimizer steps between dev evaluations");
    opt("--pretrain.dev_fraction", pc.dev_fraction, "held-out dev fraction");
    opt("--pretrain.seed", pc.seed, "pretraining seed");

    ModelConfig& mc = pc.model;
    opt("--pretrain.model.d_model", mc.d_model, "embedding width");
    opt("--pretrain.model.n_heads", mc.n_heads, "attention heads");
    opt("--pretrain.model.n_enc_layers", mc.n_enc_layers, "encoder layers");
    opt("--pretrain.model.n_dec_layers", mc.n_dec_layers, "decoder layers");
    opt("--pretrain.model.d_ff", mc.d_ff, "feed-forward width");
    opt("--pretrain.model.max_enc_len", mc.max_enc_len,
        "encoder length limit (0 = fit the corpus)");
    opt("--pretrain.model.max_dec_len", mc.max_dec_len, "decoder length limit");
    opt("--pretrain.model.vocab_size", mc.vocab_size, "token table size (0 = from the vocabulary)");

    TrainerConfig& tc = st.cfg.trainer;
    opt("--trainer.gamma", tc.gamma, "discount factor");
    opt("--trainer.gae_lambda", tc.gae_lambda, "advantage estimation lambda");
    opt("--trainer.clip_epsilon", tc.clip_epsilon, "surrogate clip width");
    opt("--trainer.c1", tc.c1, "value-loss coefficient");
    opt("--trainer.c2", tc.c2, "entropy coefficient");
    opt("--trainer.beta", tc.beta, "KL anchoring coefficient");
    opt("--trainer.lambda_q", tc.lambda_q, "batch/trait kappa mix");
    opt("--trainer.batch_size", tc.batch_size, "rollouts per update");
    opt("--trainer.ppo_epochs", tc.ppo_epochs, "optimization passes per batch");
    opt("--trainer.updates", tc.updates, "RL updates");
    opt("--trainer.rl_step_size", tc.rl_step_size, "RL learning rate");
    opt("--trainer.seed", tc.seed, "RL seed");
    opt("--trainer.kl_at_terminal", tc.kl_at_terminal,
        "apply the KL penalty to the terminal token too");
    opt("--trainer.checkpoint_every", tc.checkpoint_every,
        "updates between periodic checkpoints (0 = off)");
    opt("--trainer.qt_mode", st.qt_mode_name,
        "per-sample kappa range: prompt-pooled or schema-pooled")
        ->check(CLI::IsMember({"prompt-pooled", "schema-pooled"}));
}

} // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"Trait-level essay scoring experiments: synthetic corpus, supervised "
                 "pretraining, multi-reward RL fine-tuning, and the evaluation grid.",
                 "aeslab"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);

    CliState st;
    std::string config_opt;
    app.add_option("--config", config_opt,
                   "configuration file: key=value lines under [corpus], [pretrain], "
                   "[pretrain.model], [trainer] sections; an empty file runs the "
                   "reference desk-scale experiment; flags override it")
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    add_config_options(app, st);

    CLI::App* gen = app.add_subcommand("gen-corpus", "generate the synthetic corpus and folds");

    std::string corpus_path, ckpt_path;
    int fold = 0;
    CLI::App* pre = app.add_subcommand("pretrain", "supervised pretraining for one fold");
    pre->add_option("--corpus", corpus_path, "corpus file (default <out>/corpus.jsonl)");
    pre->add_option("--fold", fold, "held-out fold, -1 to train on everything")
        ->capture_default_str();

    CLI::App* trn = app.add_subcommand("train", "RL fine-tuning from a pretrained checkpoint");
    trn->add_option("--corpus", corpus_path, "corpus file (default <out>/corpus.jsonl)");
    trn->add_option("--checkpoint", ckpt_path,
                    "pretrained checkpoint (default <out>/pretrain.<fold>.ckpt.json)");
    trn->add_option("--fold", fold, "held-out fold, -1 for none")->capture_default_str();
    std::string train_variant;
    double ov_beta = 0, ov_clip = 0, ov_lambda_q = 0, ov_gamma = 0;
    int ov_updates = 0;
    std::uint64_t ov_seed = 0;
    CLI::Option* o_variant = trn->add_option("--variant", train_variant, "RL variant");
    CLI::Option* o_beta = trn->add_option("--beta", ov_beta, "KL anchoring coefficient");
    CLI::Option* o_clip = trn->add_option("--clip-epsilon", ov_clip, "surrogate clip width");
    CLI::Option* o_lq = trn->add_option("--lambda-q", ov_lambda_q, "batch/trait kappa mix");
    CLI::Option* o_gamma = trn->add_option("--gamma", ov_gamma, "discount factor");
    CLI::Option* o_updates = trn->add_option("--updates", ov_updates, "RL updates");
    CLI::Option* o_seed = trn->add_option("--seed", ov_seed, "RL seed");

    CLI::App* evl = app.add_subcommand("eval", "greedy evaluation of a checkpoint");
    evl->add_option("--corpus", corpus_path, "corpus file (default <out>/corpus.jsonl)");
    evl->add_option("--checkpoint", ckpt_path,
                    "checkpoint (default <out>/pretrain.<fold>.ckpt.json)");
    evl->add_option("--fold", fold, "fold to evaluate, -1 for the whole corpus")
        ->capture_default_str();
    bool gold_self_test = false;
    evl->add_flag("--gold-self-test", gold_self_test,
                  "score the gold targets against themselves (all kappa 1.0)");

    CLI::App* abl = app.add_subcommand(
        "ablate", "run every variant against one shared split (AESLAB_WORKERS for parallelism)");

    CLI::App* rpt = app.add_subcommand("report", "re-render stored aggregate reports as CSV");
    std::vector<std::string> report_files;
    std::string baseline_variant = "baseline";
    rpt->add_option("files", report_files, "aggregate report JSON files")->required();
    rpt->add_option("--baseline", baseline_variant, "variant the comparison table is relative to")
        ->capture_default_str();
    for (CLI::App* sub : {gen, pre, trn, evl, abl, rpt}) sub->fallthrough();

    // Config-file values become option tokens placed ahead of the command
    // line, so explicitly given flags always win.
    st.config_path = find_config_path(args);
    std::vector<std::string> full_args;
    if (!st.config_path.empty()) {
        try {
            full_args = config_tokens(st.config_path);
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << "\n";
            return 1;
        }
    }
    full_args.insert(full_args.end(), args.begin(), args.end());

    try {
        std::reverse(full_args.begin(), full_args.end()); // CLI11 consumes back to front
        app.parse(full_args);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    st.cfg.trainer.qt_mode = st.qt_mode_name == "schema-pooled" ? QtRangeMode::SchemaPooled
                                                                : QtRangeMode::PromptPooled;
    st.cfg.out_dir = st.out_dir;

    try {
        if (gen->parsed()) return cmd_gen_corpus(st);
        if (pre->parsed()) return cmd_pretrain(st, corpus_path, fold);
        if (trn->parsed()) {
            if (o_beta->count()) st.cfg.trainer.beta = ov_beta;
            if (o_clip->count()) st.cfg.trainer.clip_epsilon = ov_clip;
            if (o_lq->count()) st.cfg.trainer.lambda_q = ov_lambda_q;
            if (o_gamma->count()) st.cfg.trainer.gamma = ov_gamma;
            if (o_updates->count()) st.cfg.trainer.updates = ov_updates;
            if (o_seed->count()) st.cfg.trainer.seed = ov_seed;
            const std::string v = o_variant->count() ? train_variant : st.cfg.variant;
            return cmd_train(st, corpus_path, ckpt_path, fold, v);
        }
        if (evl->parsed()) return cmd_eval(st, corpus_path, ckpt_path, fold, gold_self_test);
        if (abl->parsed()) return cmd_ablate(st);
        if (rpt->parsed()) return cmd_report(st, report_files, baseline_variant);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    std::cerr << "error: no command\n";
    return 1;
}

int run_cli(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run_cli(args);
}

} // namespace aeslab
