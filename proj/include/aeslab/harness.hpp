#pragma once

// Experiment orchestration: k-fold cross-validation, the variant grid,
// fixed-vs-learned weight comparison, and mean/SD aggregation.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "aeslab/corpus.hpp"
#include "aeslab/ppo.hpp"

namespace aeslab {

struct ExperimentConfig {
    CorpusConfig corpus;
    PretrainConfig pretrain;
    TrainerConfig trainer;
    std::string variant = "samrl-biq"; // "baseline" skips the RL stage
    int folds = 5;
    std::uint64_t seed = 1;            // drives fold assignment only
    std::string out_dir;               // used by the command layer

    void validate() const;
    json to_json() const;
    static ExperimentConfig from_json(const json& j);
};

// One fully trained + evaluated fold.
struct FoldOutcome {
    int fold = -1;
    bool failed = false;
    std::string error;
    double pretrain_dev_ce = 0.0;
    EvaluationReport report;          // greedy evaluation on the held-out fold
    std::vector<json> training_log;   // empty for the baseline variant
    std::uint64_t policy_hash = 0;
};

struct AggregateReport {
    std::string variant;
    int folds_requested = 0;
    int folds_used = 0;
    std::uint64_t split_hash = 0;
    std::vector<FoldOutcome> fold_outcomes;

    std::vector<TraitId> trait_columns;       // over first
    std::vector<int> prompt_ids;
    std::map<TraitId, std::map<int, double>> cell_mean; // trait x prompt, over folds
    std::map<TraitId, std::map<int, double>> cell_sd;   // population SD
    std::map<TraitId, double> trait_mean;     // of per-fold trait averages
    std::map<TraitId, double> trait_sd;
    std::map<int, double> prompt_mean;
    std::map<int, double> prompt_sd;
    double average_mean = 0.0;                // of per-fold grand averages
    double average_sd = 0.0;
    double averaged_cell_sd = 0.0;            // mean of per-cell SDs
    double parse_failure_mean = 0.0;

    json to_json() const;
    static AggregateReport from_json(const json& j);
};

// Shared per-fold supervised models, reusable across grid variants.
struct FoldModels {
    int fold = -1;
    Model pretrained;
    double dev_ce = 0.0;
    std::vector<json> curve;
};

FoldModels pretrain_fold(const ExperimentConfig& cfg, const Corpus& corpus,
                         const Vocabulary& vocab, int fold);

// Full protocol for one variant. The corpus must already carry fold
// assignments. When shared_pretrains is given it must hold one entry per
// fold, in fold order. Failed folds are excluded from aggregation with a
// warning on stderr.
AggregateReport run_cross_validation(const ExperimentConfig& cfg, const Corpus& corpus,
                                     const Vocabulary& vocab,
                                     const std::vector<FoldModels>* shared_pretrains = nullptr);

// Convenience: generates the corpus, assigns folds, runs the variant.
AggregateReport run_cross_validation(const ExperimentConfig& cfg);

// The nine grid rows, in report order. The first is the supervised baseline;
// samrl-biq is the primary model.
const std::vector<std::string>& ablation_variants();

struct GridResult {
    std::uint64_t split_hash = 0;
    std::vector<std::string> variant_order;
    std::map<std::string, AggregateReport> reports;
};

// Runs every grid variant against one shared corpus, fold split, and set of
// per-fold pretrained models, so differences isolate the variant.
GridResult run_ablation_grid(const ExperimentConfig& base);

struct DeltaReport {
    std::map<TraitId, std::map<int, double>> cell_delta;
    std::map<TraitId, double> trait_delta;
    std::map<int, double> prompt_delta;
    double average_delta = 0.0;
    int improved_cells = 0;
    int total_cells = 0;

    json to_json() const;
};

DeltaReport compare_reports(const AggregateReport& treatment, const AggregateReport& baseline);

// Returns the number of essay ids appearing in both the training and test
// side of any fold (0 is the only acceptable value), checking folds 0..k-1.
std::size_t fold_leak_count(const Corpus& corpus, int k);

// CSV renderings: one variant per row.
std::string grid_trait_csv(const GridResult& grid);
std::string grid_prompt_csv(const GridResult& grid);
std::string grid_comparison_csv(const GridResult& grid, const std::string& baseline_variant);

} // namespace aeslab
