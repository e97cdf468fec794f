#include "aeslab/harness.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace aeslab {

void ExperimentConfig::validate() const {
    corpus.validate();
    pretrain.validate();
    trainer.validate();
    if (folds < 2) throw std::invalid_argument("folds must be >= 2");
    if (variant != "baseline") resolve_variant(variant, trainer); // throws if unknown
}

json ExperimentConfig::to_json() const {
    return json{{"corpus", corpus.to_json()},   {"pretrain", pretrain.to_json()},
                {"trainer", trainer.to_json()}, {"variant", variant},
                {"folds", folds},               {"seed", seed},
                {"out_dir", out_dir}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    ExperimentConfig c;
    if (j.contains("corpus")) c.corpus = CorpusConfig::from_json(j.at("corpus"));
    if (j.contains("pretrain")) c.pretrain = PretrainConfig::from_json(j.at("pretrain"));
    if (j.contains("trainer")) c.trainer = TrainerConfig::from_json(j.at("trainer"));
    c.variant = j.value("variant", c.variant);
    c.folds = j.value("folds", c.folds);
    c.seed = j.value("seed", c.seed);
    c.out_dir = j.value("out_dir", c.out_dir);
    c.validate();
    return c;
}

namespace {

struct MeanSd {
    double mean = 0.0;
    double sd = 0.0;
};

// Population standard deviation: the fold set is the whole population of
// runs being summarized, not a sample from a larger one.
MeanSd mean_sd(const std::vector<double>& xs) {
    MeanSd out;
    if (xs.empty()) return out;
    double sum = 0.0;
    for (double x : xs) sum += x;
    out.mean = sum / static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - out.mean) * (x - out.mean);
    out.sd = std::sqrt(var / static_cast<double>(xs.size()));
    return out;
}

} // namespace

FoldModels pretrain_fold(const ExperimentConfig& cfg, const Corpus& corpus,
                         const Vocabulary& vocab, int fold) {
    PretrainConfig pc = cfg.pretrain;
    pc.seed = derive_seed(cfg.pretrain.seed, "fold/" + std::to_string(fold));
    PretrainResult r = supervised_train(corpus, vocab, pc, fold);
    FoldModels out;
    out.fold = fold;
    out.pretrained = std::move(r.model);
    out.dev_ce = r.best_dev_ce;
    out.curve = std::move(r.curve);
    return out;
}

AggregateReport run_cross_validation(const ExperimentConfig& cfg, const Corpus& corpus,
                                     const Vocabulary& vocab,
                                     const std::vector<FoldModels>* shared_pretrains) {
    cfg.validate();
    if (shared_pretrains && static_cast<int>(shared_pretrains->size()) != cfg.folds)
        throw std::invalid_argument("shared pretrain set does not cover every fold");

    AggregateReport agg;
    agg.variant = cfg.variant;
    agg.folds_requested = cfg.folds;
    agg.split_hash = fold_split_hash(corpus);
    agg.trait_columns = trait_prediction_order(corpus.schema);
    std::reverse(agg.trait_columns.begin(), agg.trait_columns.end());
    for (const PromptSpec& p : corpus.schema.prompts) agg.prompt_ids.push_back(p.prompt_id);

    for (int fold = 0; fold < cfg.folds; ++fold) {
        FoldOutcome out;
        out.fold = fold;
        try {
            FoldModels local;
            const FoldModels* models;
            if (shared_pretrains) {
                models = &(*shared_pretrains)[static_cast<std::size_t>(fold)];
                if (models->fold != fold)
                    throw std::logic_error("shared pretrains are out of fold order");
            } else {
                local = pretrain_fold(cfg, corpus, vocab, fold);
                models = &local;
            }
            out.pretrain_dev_ce = models->dev_ce;

            Model final_policy = models->pretrained;
            if (cfg.variant != "baseline") {
                TrainerConfig tc = cfg.trainer;
                tc.seed = derive_seed(cfg.trainer.seed, "fold/" + std::to_string(fold));
                Model anchor = clone_frozen(models->pretrained);
                RlResult rl =
                    train_rl(models->pretrained, anchor, corpus, vocab, tc, cfg.variant, fold);
                out.training_log = std::move(rl.log);
                if (rl.aborted) throw std::runtime_error("RL run aborted on non-finite losses");
                final_policy = std::move(rl.policy);
            }

            auto held_out = essays_in_fold(corpus, fold);
            if (held_out.empty()) throw std::runtime_error("fold has no held-out essays");
            out.report = evaluate_policy(final_policy, corpus.schema, vocab, held_out);
            out.policy_hash = final_policy.param_hash();
        } catch (const std::exception& e) {
            out.failed = true;
            out.error = e.what();
            std::cerr << "[harness] warning: fold " << fold << " failed for variant "
                      << cfg.variant << ": " << e.what() << "\n";
        }
        agg.fold_outcomes.push_back(std::move(out));
    }

    // Aggregate over the successful folds.
    std::vector<const FoldOutcome*> ok;
    for (const FoldOutcome& f : agg.fold_outcomes)
        if (!f.failed) ok.push_back(&f);
    agg.folds_used = static_cast<int>(ok.size());
    if (ok.empty()) return agg;

    for (const TraitId& trait : agg.trait_columns) {
        for (int pid : agg.prompt_ids) {
            std::vector<double> cell;
            for (const FoldOutcome* f : ok) {
                auto ti = f->report.trait_prompt_qwk.find(trait);
                if (ti == f->report.trait_prompt_qwk.end()) continue;
                auto pi = ti->second.find(pid);
                if (pi != ti->second.end()) cell.push_back(pi->second);
            }
            if (cell.empty()) continue;
            MeanSd ms = mean_sd(cell);
            agg.cell_mean[trait][pid] = ms.mean;
            agg.cell_sd[trait][pid] = ms.sd;
        }
        std::vector<double> tvals;
        for (const FoldOutcome* f : ok) {
            auto it = f->report.trait_avg.find(trait);
            if (it != f->report.trait_avg.end()) tvals.push_back(it->second);
        }
        if (!tvals.empty()) {
            MeanSd ms = mean_sd(tvals);
            agg.trait_mean[trait] = ms.mean;
            agg.trait_sd[trait] = ms.sd;
        }
    }
    for (int pid : agg.prompt_ids) {
        std::vector<double> pvals;
        for (const FoldOutcome* f : ok) {
            auto it = f->report.prompt_avg.find(pid);
            if (it != f->report.prompt_avg.end()) pvals.push_back(it->second);
        }
        if (!pvals.empty()) {
            MeanSd ms = mean_sd(pvals);
            agg.prompt_mean[pid] = ms.mean;
            agg.prompt_sd[pid] = ms.sd;
        }
    }
    {
        std::vector<double> avgs, fails;
        for (const FoldOutcome* f : ok) {
            avgs.push_back(f->report.average_qwk);
            fails.push_back(f->report.parse_failure_rate);
        }
        MeanSd ms = mean_sd(avgs);
        agg.average_mean = ms.mean;
        agg.average_sd = ms.sd;
        agg.parse_failure_mean = mean_sd(fails).mean;
    }
    {
        double total = 0.0;
        int n = 0;
        for (const auto& [trait, row] : agg.cell_sd)
            for (const auto& [pid, sd] : row) {
                total += sd;
                ++n;
            }
        agg.averaged_cell_sd = n ? total / n : 0.0;
    }
    return agg;
}

AggregateReport run_cross_validation(const ExperimentConfig& cfg) {
    cfg.validate();
    Schema schema = load_prompt_schema();
    Corpus corpus = generate_corpus(schema, cfg.corpus);
    make_folds(corpus, cfg.folds, derive_seed(cfg.seed, "folds"));
    Vocabulary vocab = build_vocab(schema);
    return run_cross_validation(cfg, corpus, vocab);
}

const std::vector<std::string>& ablation_variants() {
    static const std::vector<std::string> kVariants{
        "baseline",  "samrl-biq",     "samrl-uniqt",   "samrl-uniqb",  "sasrl-m",
        "sasrl-q",   "fixed:0.3,0.7", "fixed:0.5,0.5", "fixed:0.7,0.3"};
    return kVariants;
}

GridResult run_ablation_grid(const ExperimentConfig& base) {
    base.validate();
    Schema schema = load_prompt_schema();
    Corpus corpus = generate_corpus(schema, base.corpus);
    make_folds(corpus, base.folds, derive_seed(base.seed, "folds"));
    Vocabulary vocab = build_vocab(schema);

    std::vector<FoldModels> pretrains;
    for (int fold = 0; fold < base.folds; ++fold)
        pretrains.push_back(pretrain_fold(base, corpus, vocab, fold));

    GridResult grid;
    grid.split_hash = fold_split_hash(corpus);
    grid.variant_order = ablation_variants();
    for (const std::string& variant : grid.variant_order) {
        ExperimentConfig cfg = base;
        cfg.variant = variant;
        grid.reports[variant] = run_cross_validation(cfg, corpus, vocab, &pretrains);
    }
    return grid;
}

DeltaReport compare_reports(const AggregateReport& treatment, const AggregateReport& baseline) {
    DeltaReport d;
    for (const auto& [trait, row] : treatment.cell_mean) {
        auto bt = baseline.cell_mean.find(trait);
        if (bt == baseline.cell_mean.end()) continue;
        for (const auto& [pid, val] : row) {
            auto bp = bt->second.find(pid);
            if (bp == bt->second.end()) continue;
            double delta = val - bp->second;
            d.cell_delta[trait][pid] = delta;
            ++d.total_cells;
            if (delta > 0.0) ++d.improved_cells;
        }
    }
    for (const auto& [trait, val] : treatment.trait_mean) {
        auto it = baseline.trait_mean.find(trait);
        if (it != baseline.trait_mean.end()) d.trait_delta[trait] = val - it->second;
    }
    for (const auto& [pid, val] : treatment.prompt_mean) {
        auto it = baseline.prompt_mean.find(pid);
        if (it != baseline.prompt_mean.end()) d.prompt_delta[pid] = val - it->second;
    }
    d.average_delta = treatment.average_mean - baseline.average_mean;
    return d;
}

std::size_t fold_leak_count(const Corpus& corpus, int k) {
    std::size_t leaks = 0;
    for (int fold = 0; fold < k; ++fold) {
        std::set<std::int64_t> test_ids, train_ids;
        for (const EssayRecord& e : corpus.essays) {
            if (e.fold == fold)
                test_ids.insert(e.essay_id);
            else
                train_ids.insert(e.essay_id);
        }
        for (std::int64_t id : test_ids)
            if (train_ids.count(id)) ++leaks;
    }
    return leaks;
}

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

} // namespace

std::string grid_trait_csv(const GridResult& grid) {
    std::ostringstream out;
    out << "variant";
    const AggregateReport& first = grid.reports.at(grid.variant_order.front());
    for (const TraitId& t : first.trait_columns) out << "," << t;
    out << ",avg,avg_sd,parse_failure\n";
    for (const std::string& v : grid.variant_order) {
        const AggregateReport& r = grid.reports.at(v);
        out << v;
        for (const TraitId& t : first.trait_columns) {
            auto it = r.trait_mean.find(t);
            out << ",";
            if (it != r.trait_mean.end()) out << fmt(it->second);
        }
        out << "," << fmt(r.average_mean) << "," << fmt(r.average_sd) << ","
            << fmt(r.parse_failure_mean) << "\n";
    }
    return out.str();
}

std::string grid_prompt_csv(const GridResult& grid) {
    std::ostringstream out;
    out << "variant";
    const AggregateReport& first = grid.reports.at(grid.variant_order.front());
    for (int pid : first.prompt_ids) out << ",p" << pid;
    out << ",avg\n";
    for (const std::string& v : grid.variant_order) {
        const AggregateReport& r = grid.reports.at(v);
        out << v;
        for (int pid : first.prompt_ids) {
            auto it = r.prompt_mean.find(pid);
            out << ",";
            if (it != r.prompt_mean.end()) out << fmt(it->second);
        }
        out << "," << fmt(r.average_mean) << "\n";
    }
    return out.str();
}

std::string grid_comparison_csv(const GridResult& grid, const std::string& baseline_variant) {
    const AggregateReport& base = grid.reports.at(baseline_variant);
    std::ostringstream out;
    out << "variant,primary,avg,avg_delta,improved_cells,total_cells,parse_failure\n";
    for (const std::string& v : grid.variant_order) {
        const AggregateReport& r = grid.reports.at(v);
        DeltaReport d = compare_reports(r, base);
        out << v << "," << (v == "samrl-biq" ? "yes" : "no") << "," << fmt(r.average_mean) << ","
            << fmt(d.average_delta) << "," << d.improved_cells << "," << d.total_cells << ","
            << fmt(r.parse_failure_mean) << "\n";
    }
    return out.str();
}

namespace {

json map_to_json(const std::map<TraitId, double>& m) {
    json out = json::object();
    for (const auto& [k, v] : m) out[k] = v;
    return out;
}

json pmap_to_json(const std::map<int, double>& m) {
    json out = json::object();
    for (const auto& [k, v] : m) out[std::to_string(k)] = v;
    return out;
}

json cells_to_json(const std::map<TraitId, std::map<int, double>>& m) {
    json out = json::object();
    for (const auto& [t, row] : m) out[t] = pmap_to_json(row);
    return out;
}

std::map<TraitId, double> map_from_json(const json& j) {
    std::map<TraitId, double> out;
    for (auto it = j.begin(); it != j.end(); ++it) out[it.key()] = it.value().get<double>();
    return out;
}

std::map<int, double> pmap_from_json(const json& j) {
    std::map<int, double> out;
    for (auto it = j.begin(); it != j.end(); ++it)
        out[std::stoi(it.key())] = it.value().get<double>();
    return out;
}

std::map<TraitId, std::map<int, double>> cells_from_json(const json& j) {
    std::map<TraitId, std::map<int, double>> out;
    for (auto it = j.begin(); it != j.end(); ++it) out[it.key()] = pmap_from_json(it.value());
    return out;
}

} // namespace

json AggregateReport::to_json() const {
    json folds_json = json::array();
    for (const FoldOutcome& f : fold_outcomes) {
        json fj{{"fold", f.fold},
                {"failed", f.failed},
                {"pretrain_dev_ce", f.pretrain_dev_ce},
                {"policy_hash", hash_hex(f.policy_hash)}};
        if (f.failed)
            fj["error"] = f.error;
        else
            fj["report"] = report_to_json(f.report);
        if (!f.training_log.empty()) fj["training_log"] = f.training_log;
        folds_json.push_back(std::move(fj));
    }
    return json{{"variant", variant},
                {"folds_requested", folds_requested},
                {"folds_used", folds_used},
                {"split_hash", hash_hex(split_hash)},
                {"trait_columns", trait_columns},
                {"prompt_ids", prompt_ids},
                {"cell_mean", cells_to_json(cell_mean)},
                {"cell_sd", cells_to_json(cell_sd)},
                {"trait_mean", map_to_json(trait_mean)},
                {"trait_sd", map_to_json(trait_sd)},
                {"prompt_mean", pmap_to_json(prompt_mean)},
                {"prompt_sd", pmap_to_json(prompt_sd)},
                {"average_mean", average_mean},
                {"average_sd", average_sd},
                {"averaged_cell_sd", averaged_cell_sd},
                {"parse_failure_mean", parse_failure_mean},
                {"fold_outcomes", std::move(folds_json)}};
}

AggregateReport AggregateReport::from_json(const json& j) {
    AggregateReport r;
    r.variant = j.at("variant").get<std::string>();
    r.folds_requested = j.at("folds_requested").get<int>();
    r.folds_used = j.at("folds_used").get<int>();
    r.split_hash = std::stoull(j.at("split_hash").get<std::string>(), nullptr, 16);
    r.trait_columns = j.at("trait_columns").get<std::vector<TraitId>>();
    r.prompt_ids = j.at("prompt_ids").get<std::vector<int>>();
    r.cell_mean = cells_from_json(j.at("cell_mean"));
    r.cell_sd = cells_from_json(j.at("cell_sd"));
    r.trait_mean = map_from_json(j.at("trait_mean"));
    r.trait_sd = map_from_json(j.at("trait_sd"));
    r.prompt_mean = pmap_from_json(j.at("prompt_mean"));
    r.prompt_sd = pmap_from_json(j.at("prompt_sd"));
    r.average_mean = j.at("average_mean").get<double>();
    r.average_sd = j.at("average_sd").get<double>();
    r.averaged_cell_sd = j.at("averaged_cell_sd").get<double>();
    r.parse_failure_mean = j.at("parse_failure_mean").get<double>();
    for (const json& fj : j.at("fold_outcomes")) {
        FoldOutcome f;
        f.fold = fj.at("fold").get<int>();
        f.failed = fj.at("failed").get<bool>();
        f.pretrain_dev_ce = fj.at("pretrain_dev_ce").get<double>();
        f.policy_hash = std::stoull(fj.at("policy_hash").get<std::string>(), nullptr, 16);
        if (f.failed)
            f.error = fj.value("error", "");
        else
            f.report = report_from_json(fj.at("report"));
        if (fj.contains("training_log"))
            f.training_log = fj.at("training_log").get<std::vector<json>>();
        r.fold_outcomes.push_back(std::move(f));
    }
    return r;
}

json DeltaReport::to_json() const {
    return json{{"cell_delta", cells_to_json(cell_delta)},
                {"trait_delta", map_to_json(trait_delta)},
                {"prompt_delta", pmap_to_json(prompt_delta)},
                {"average_delta", average_delta},
                {"improved_cells", improved_cells},
                {"total_cells", total_cells}};
}

} // namespace aeslab
