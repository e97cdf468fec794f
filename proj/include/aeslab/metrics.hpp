#pragma once
// Agreement metrics and reward signals: quadratic weighted kappa over
// integer ratings (whole-batch and single-sample variants), the
// bidirectional mixture reward, the negated mean trait-wise RMSE, and the
// per-trait/per-prompt evaluation report.

#include <map>
#include <vector>

#include <Eigen/Dense>

#include "aeslab/types.hpp"
#include "aeslab/util.hpp"

namespace aeslab {

struct QwkOutcome {
    double value = 0.0;
    // Set when the zero-denominator rule fired (both rating lists constant)
    // or when no rating pairs existed at all.
    bool degenerate = false;
};

// W(i,j) = (i-j)^2 / (n_ratings-1)^2. Throws for n_ratings < 2.
Eigen::MatrixXd weight_matrix(int n_ratings);

// 1 - sum(W.*C)/sum(W.*E) with C the joint count matrix and
// E = outer(hist_gold, hist_pred)/n, so sum(E) == sum(C) == n. A zero
// denominator returns 1.0 when gold == pred elementwise, else 0.0, with
// the degenerate flag set.
QwkOutcome qwk(const std::vector<int>& gold, const std::vector<int>& pred, ScoreRange range);

// Every trait pair with a scored gold value, across the whole batch,
// flattened into one rating set on `range`. An unset prediction against a
// scored gold contributes the worst in-range value: lo when gold is above
// the range midpoint, else hi. Traits with unset gold are excluded. All
// pairs excluded -> 0.0 with the degenerate flag.
QwkOutcome batch_qwk(const std::vector<TraitScoreVector>& gold,
                     const std::vector<TraitScoreVector>& pred, ScoreRange range);

// The same rating-set construction over a single sample's traits.
QwkOutcome trait_qwk(const TraitScoreVector& gold, const TraitScoreVector& pred,
                     ScoreRange range);

struct MseOutcome {
    double value = 0.0; // always <= 0
    bool empty = false; // no scored gold pairs anywhere
};

// -(1/m) * sum_j rmse_j over the m traits with at least one scored gold
// pair; unset predictions substitute the worst case on `range` as in
// batch_qwk.
MseOutcome mse_reward(const std::vector<TraitScoreVector>& gold,
                      const std::vector<TraitScoreVector>& pred, ScoreRange range);

// Replaces unset predictions for gold-scored traits with the worst value
// inside the prompt's own trait range (farthest endpoint from gold), and
// forces traits with unset gold to unset. Output of this feeds every
// reward/report computation in the training pipeline.
TraitScoreVector resolve_predictions(const TraitScoreVector& pred, const TraitScoreVector& gold,
                                     const PromptSpec& prompt);

// Rating range used for the per-sample kappa.
enum class QtRangeMode {
    PromptPooled, // union of the sample's prompt trait ranges
    SchemaPooled, // union over the whole schema
};

struct RewardInputs {
    std::vector<int> prompt_ids;
    std::vector<TraitScoreVector> gold;
    std::vector<TraitScoreVector> pred; // raw parse output; resolved internally
};

struct RewardBundle {
    std::vector<double> r_q;        // lambda*q_b + (1-lambda)*q_t per sample
    double r_m = 0.0;               // batch scalar, <= 0
    double q_b = 0.0;
    std::vector<double> q_t;        // 0.0 where undefined
    double lambda = 0.5;
    bool q_b_degenerate = false;
    bool r_m_empty = false;
    std::vector<bool> q_t_defined;  // false -> contribution 0 with flag
};

// One-stop reward computation for a training batch: resolves predictions,
// computes the whole-batch kappa on the union of the batch prompts' score
// ranges, the per-sample kappa on the QtRangeMode range, and the RMSE
// reward.
RewardBundle compute_rewards(const RewardInputs& in, const Schema& schema, double lambda,
                             QtRangeMode qt_mode = QtRangeMode::PromptPooled);

struct EvalSample {
    int prompt_id = 0;
    TraitScoreVector gold;
    TraitScoreVector pred;
    bool parse_ok = true;
};

// Per-(trait, prompt) kappa on that cell's own score range, plus per-trait
// averages across prompts, per-prompt averages across traits, the grand
// average (mean of per-trait averages), and the parse-failure rate. Cells
// with no scored pairs are absent and excluded from averages.
struct EvaluationReport {
    std::vector<TraitId> trait_columns; // presentation order
    std::map<TraitId, std::map<int, double>> trait_prompt_qwk;
    std::map<TraitId, double> trait_avg;
    std::map<int, double> prompt_avg;
    double average_qwk = 0.0;
    double parse_failure_rate = 0.0;
    int sample_count = 0;
};

EvaluationReport evaluate_report(const std::vector<EvalSample>& samples, const Schema& schema);

json report_to_json(const EvaluationReport& report);
EvaluationReport report_from_json(const json& j);

// Rows = model names, columns = traits (presentation order) plus avg.
std::string report_trait_csv(const std::vector<std::pair<std::string, EvaluationReport>>& rows);
// Rows = model names, columns = prompts plus avg.
std::string report_prompt_csv(const std::vector<std::pair<std::string, EvaluationReport>>& rows);

} // namespace aeslab
