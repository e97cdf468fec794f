#include "aeslab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace aeslab {

Eigen::MatrixXd weight_matrix(int n_ratings) {
    if (n_ratings < 2) throw std::domain_error("weight matrix needs at least 2 ratings");
    Eigen::MatrixXd w(n_ratings, n_ratings);
    const double denom = static_cast<double>(n_ratings - 1) * (n_ratings - 1);
    for (int i = 0; i < n_ratings; ++i)
        for (int j = 0; j < n_ratings; ++j) w(i, j) = static_cast<double>((i - j) * (i - j)) / denom;
    return w;
}

QwkOutcome qwk(const std::vector<int>& gold, const std::vector<int>& pred, ScoreRange range) {
    if (gold.empty()) throw std::invalid_argument("empty rating set");
    if (gold.size() != pred.size()) throw std::invalid_argument("rating lists differ in length");
    const int n_ratings = range.span();
    if (n_ratings < 2) throw std::invalid_argument("rating range must span at least 2 values");
    for (std::size_t i = 0; i < gold.size(); ++i)
        if (!range.contains(gold[i]) || !range.contains(pred[i]))
            throw std::invalid_argument("rating outside declared range");

    const double n = static_cast<double>(gold.size());
    Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(n_ratings, n_ratings);
    Eigen::VectorXd hist_gold = Eigen::VectorXd::Zero(n_ratings);
    Eigen::VectorXd hist_pred = Eigen::VectorXd::Zero(n_ratings);
    for (std::size_t i = 0; i < gold.size(); ++i) {
        int g = gold[i] - range.lo;
        int p = pred[i] - range.lo;
        counts(g, p) += 1.0;
        hist_gold(g) += 1.0;
        hist_pred(p) += 1.0;
    }
    Eigen::MatrixXd expectation = hist_gold * hist_pred.transpose() / n;
    Eigen::MatrixXd w = weight_matrix(n_ratings);
    double num = (w.array() * counts.array()).sum();
    double den = (w.array() * expectation.array()).sum();
    if (den == 0.0) {
        // Both lists constant. Equal constants agree perfectly; different
        // ones cannot reach this branch but are handled for completeness.
        return {gold == pred ? 1.0 : 0.0, true};
    }
    return {1.0 - num / den, false};
}

namespace {

int worst_case_pred(int gold, ScoreRange range) {
    double mid = (range.lo + range.hi) / 2.0;
    return gold > mid ? range.lo : range.hi;
}

// Appends the sample's scored-gold pairs, substituting missing predictions.
void flatten_pairs(const TraitScoreVector& gold, const TraitScoreVector& pred, ScoreRange range,
                   std::vector<int>& out_gold, std::vector<int>& out_pred) {
    for (const auto& [trait, g] : gold.entries()) {
        if (!g.has_value()) continue;
        TraitScore p = pred.has(trait) ? pred.get(trait) : std::nullopt;
        out_gold.push_back(*g);
        out_pred.push_back(p.has_value() ? *p : worst_case_pred(*g, range));
    }
}

} // namespace

QwkOutcome batch_qwk(const std::vector<TraitScoreVector>& gold,
                     const std::vector<TraitScoreVector>& pred, ScoreRange range) {
    if (gold.empty()) throw std::invalid_argument("empty batch");
    if (gold.size() != pred.size()) throw std::invalid_argument("batch lists differ in length");
    std::vector<int> flat_gold, flat_pred;
    for (std::size_t i = 0; i < gold.size(); ++i)
        flatten_pairs(gold[i], pred[i], range, flat_gold, flat_pred);
    if (flat_gold.empty()) return {0.0, true};
    return qwk(flat_gold, flat_pred, range);
}

QwkOutcome trait_qwk(const TraitScoreVector& gold, const TraitScoreVector& pred,
                     ScoreRange range) {
    std::vector<int> flat_gold, flat_pred;
    flatten_pairs(gold, pred, range, flat_gold, flat_pred);
    if (flat_gold.empty()) return {0.0, true};
    return qwk(flat_gold, flat_pred, range);
}

MseOutcome mse_reward(const std::vector<TraitScoreVector>& gold,
                      const std::vector<TraitScoreVector>& pred, ScoreRange range) {
    if (gold.empty()) throw std::invalid_argument("empty batch");
    if (gold.size() != pred.size()) throw std::invalid_argument("batch lists differ in length");
    // trait -> list of squared errors over samples where gold is scored
    std::map<TraitId, std::vector<double>> sq_err;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        for (const auto& [trait, g] : gold[i].entries()) {
            if (!g.has_value()) continue;
            TraitScore p = pred[i].has(trait) ? pred[i].get(trait) : std::nullopt;
            double pv = p.has_value() ? static_cast<double>(*p)
                                      : static_cast<double>(worst_case_pred(*g, range));
            double d = static_cast<double>(*g) - pv;
            sq_err[trait].push_back(d * d);
        }
    }
    if (sq_err.empty()) return {0.0, true};
    double sum_rmse = 0.0;
    for (const auto& [_, errs] : sq_err) {
        double mean = 0.0;
        for (double e : errs) mean += e;
        mean /= static_cast<double>(errs.size());
        sum_rmse += std::sqrt(mean);
    }
    return {-sum_rmse / static_cast<double>(sq_err.size()), false};
}

TraitScoreVector resolve_predictions(const TraitScoreVector& pred, const TraitScoreVector& gold,
                                     const PromptSpec& prompt) {
    TraitScoreVector out = gold; // copies the trait universe and its order
    for (const auto& [trait, g] : gold.entries()) {
        if (!g.has_value()) {
            out.set(trait, std::nullopt);
            continue;
        }
        TraitScore p = pred.has(trait) ? pred.get(trait) : std::nullopt;
        if (p.has_value())
            out.set(trait, *p);
        else
            out.set(trait, worst_case_pred(*g, prompt.range_of(trait)));
    }
    return out;
}

namespace {

ScoreRange union_range(ScoreRange a, ScoreRange b) {
    return {std::min(a.lo, b.lo), std::max(a.hi, b.hi)};
}

ScoreRange batch_union_range(const std::vector<int>& prompt_ids, const Schema& schema) {
    bool first = true;
    ScoreRange r{0, 0};
    std::set<int> seen(prompt_ids.begin(), prompt_ids.end());
    for (int pid : seen) {
        ScoreRange pr = schema.prompt(pid).pooled_range();
        r = first ? pr : union_range(r, pr);
        first = false;
    }
    if (first) throw std::invalid_argument("no prompts in batch");
    return r;
}

} // namespace

RewardBundle compute_rewards(const RewardInputs& in, const Schema& schema, double lambda,
                             QtRangeMode qt_mode) {
    if (lambda < 0.0 || lambda > 1.0) throw std::invalid_argument("lambda must be in [0,1]");
    const std::size_t n = in.gold.size();
    if (n == 0) throw std::invalid_argument("empty batch");
    if (in.pred.size() != n || in.prompt_ids.size() != n)
        throw std::invalid_argument("reward inputs misaligned");

    std::vector<TraitScoreVector> resolved;
    resolved.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
        resolved.push_back(
            resolve_predictions(in.pred[i], in.gold[i], schema.prompt(in.prompt_ids[i])));

    RewardBundle out;
    out.lambda = lambda;
    ScoreRange brange = batch_union_range(in.prompt_ids, schema);
    QwkOutcome qb = batch_qwk(in.gold, resolved, brange);
    out.q_b = qb.value;
    out.q_b_degenerate = qb.degenerate;

    MseOutcome mse = mse_reward(in.gold, resolved, brange);
    out.r_m = mse.value;
    out.r_m_empty = mse.empty;

    out.q_t.resize(n);
    out.q_t_defined.resize(n);
    out.r_q.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const PromptSpec& prompt = schema.prompt(in.prompt_ids[i]);
        ScoreRange qr = qt_mode == QtRangeMode::PromptPooled ? prompt.pooled_range()
                                                             : schema.pooled_range();
        bool any_gold = false;
        for (const auto& [_, g] : in.gold[i].entries())
            if (g.has_value()) any_gold = true;
        if (!any_gold) {
            out.q_t[i] = 0.0;
            out.q_t_defined[i] = false;
        } else {
            QwkOutcome qt = trait_qwk(in.gold[i], resolved[i], qr);
            out.q_t[i] = qt.value;
            out.q_t_defined[i] = true;
        }
        out.r_q[i] = lambda * out.q_b + (1.0 - lambda) * out.q_t[i];
    }
    return out;
}

EvaluationReport evaluate_report(const std::vector<EvalSample>& samples, const Schema& schema) {
    if (samples.empty()) throw std::invalid_argument("no samples to evaluate");
    EvaluationReport report;
    report.sample_count = static_cast<int>(samples.size());
    {
        std::vector<TraitId> order = trait_prediction_order(schema);
        report.trait_columns.assign(order.rbegin(), order.rend());
    }
    int failures = 0;
    for (const auto& s : samples)
        if (!s.parse_ok) ++failures;
    report.parse_failure_rate = static_cast<double>(failures) / samples.size();

    for (const auto& prompt : schema.prompts) {
        for (const auto& trait : prompt.traits) {
            std::vector<int> flat_gold, flat_pred;
            for (const auto& s : samples) {
                if (s.prompt_id != prompt.prompt_id) continue;
                TraitScore g = s.gold.get(trait);
                if (!g.has_value()) continue;
                TraitScore p = s.pred.has(trait) ? s.pred.get(trait) : std::nullopt;
                flat_gold.push_back(*g);
                flat_pred.push_back(p.has_value()
                                        ? *p
                                        : worst_case_pred(*g, prompt.range_of(trait)));
            }
            if (flat_gold.empty()) continue;
            report.trait_prompt_qwk[trait][prompt.prompt_id] =
                qwk(flat_gold, flat_pred, prompt.range_of(trait)).value;
        }
    }
    for (const auto& [trait, cells] : report.trait_prompt_qwk) {
        double sum = 0.0;
        for (const auto& [_, v] : cells) sum += v;
        report.trait_avg[trait] = sum / static_cast<double>(cells.size());
    }
    std::map<int, std::pair<double, int>> prompt_acc;
    for (const auto& [_, cells] : report.trait_prompt_qwk)
        for (const auto& [pid, v] : cells) {
            prompt_acc[pid].first += v;
            prompt_acc[pid].second += 1;
        }
    for (const auto& [pid, acc] : prompt_acc)
        report.prompt_avg[pid] = acc.first / acc.second;
    if (!report.trait_avg.empty()) {
        double sum = 0.0;
        for (const auto& [_, v] : report.trait_avg) sum += v;
        report.average_qwk = sum / static_cast<double>(report.trait_avg.size());
    }
    return report;
}

json report_to_json(const EvaluationReport& report) {
    json traits = json::array();
    for (const auto& t : report.trait_columns) {
        json row{{"trait", t}};
        json cells = json::object();
        auto it = report.trait_prompt_qwk.find(t);
        if (it != report.trait_prompt_qwk.end())
            for (const auto& [pid, v] : it->second) cells[std::to_string(pid)] = v;
        row["prompt_qwk"] = cells;
        auto av = report.trait_avg.find(t);
        if (av != report.trait_avg.end()) row["avg"] = av->second;
        traits.push_back(row);
    }
    json prompts = json::object();
    for (const auto& [pid, v] : report.prompt_avg) prompts[std::to_string(pid)] = v;
    return json{{"traits", traits},
                {"prompt_avg", prompts},
                {"average_qwk", report.average_qwk},
                {"parse_failure_rate", report.parse_failure_rate},
                {"sample_count", report.sample_count}};
}

EvaluationReport report_from_json(const json& j) {
    EvaluationReport report;
    for (const auto& row : j.at("traits")) {
        TraitId t = row.at("trait").get<TraitId>();
        report.trait_columns.push_back(t);
        for (const auto& [pid, v] : row.at("prompt_qwk").items())
            report.trait_prompt_qwk[t][std::stoi(pid)] = v.get<double>();
        if (row.contains("avg")) report.trait_avg[t] = row.at("avg").get<double>();
    }
    for (const auto& [pid, v] : j.at("prompt_avg").items())
        report.prompt_avg[std::stoi(pid)] = v.get<double>();
    report.average_qwk = j.at("average_qwk").get<double>();
    report.parse_failure_rate = j.at("parse_failure_rate").get<double>();
    report.sample_count = j.at("sample_count").get<int>();
    return report;
}

namespace {

std::string fmt_cell(double v) {
    std::ostringstream ss;
    ss.precision(6);
    ss << std::fixed << v;
    return ss.str();
}

} // namespace

std::string report_trait_csv(const std::vector<std::pair<std::string, EvaluationReport>>& rows) {
    if (rows.empty()) throw std::invalid_argument("no reports");
    std::string out = "model";
    for (const auto& t : rows.front().second.trait_columns) out += "," + t;
    out += ",avg\n";
    for (const auto& [name, rep] : rows) {
        out += name;
        for (const auto& t : rep.trait_columns) {
            auto it = rep.trait_avg.find(t);
            out += ",";
            out += it == rep.trait_avg.end() ? "" : fmt_cell(it->second);
        }
        out += "," + fmt_cell(rep.average_qwk) + "\n";
    }
    return out;
}

std::string report_prompt_csv(const std::vector<std::pair<std::string, EvaluationReport>>& rows) {
    if (rows.empty()) throw std::invalid_argument("no reports");
    std::set<int> pids;
    for (const auto& [_, rep] : rows)
        for (const auto& [pid, __] : rep.prompt_avg) pids.insert(pid);
    std::string out = "model";
    for (int pid : pids) out += ",p" + std::to_string(pid);
    out += ",avg\n";
    for (const auto& [name, rep] : rows) {
        out += name;
        double sum = 0.0;
        int cnt = 0;
        for (int pid : pids) {
            auto it = rep.prompt_avg.find(pid);
            out += ",";
            if (it != rep.prompt_avg.end()) {
                out += fmt_cell(it->second);
                sum += it->second;
                ++cnt;
            }
        }
        out += "," + (cnt ? fmt_cell(sum / cnt) : std::string()) + "\n";
    }
    return out;
}

} // namespace aeslab
