#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <random>

#include "aeslab/metrics.hpp"
#include "oracles.hpp"

using namespace aeslab;

namespace {

Schema schema() { return load_prompt_schema(); }

TraitScoreVector vec(const Schema& s, std::initializer_list<std::pair<TraitId, int>> scores) {
    TraitScoreVector v(trait_prediction_order(s));
    for (const auto& [t, val] : scores) v.set(t, val);
    return v;
}

} // namespace

TEST_CASE("weight matrix values") {
    Eigen::MatrixXd w = weight_matrix(4);
    CHECK(w(0, 0) == 0.0);
    CHECK(w(2, 2) == 0.0);
    CHECK(w(0, 3) == 1.0);
    CHECK(w(3, 0) == 1.0);
    CHECK(w(1, 3) == doctest::Approx(4.0 / 9.0).epsilon(1e-15));
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) CHECK(w(i, j) == w(j, i));
    CHECK_THROWS_AS(weight_matrix(1), std::domain_error);
}

TEST_CASE("worked qwk value is exact") {
    QwkOutcome out = qwk({0, 0, 1, 2}, {0, 1, 1, 2}, ScoreRange{0, 2});
    CHECK(std::abs(out.value - 0.8) < 1e-12);
    CHECK_FALSE(out.degenerate);
}

TEST_CASE("qwk trivial and degenerate branches") {
    CHECK(qwk({0, 1, 2}, {0, 1, 2}, {0, 2}).value == 1.0);
    QwkOutcome deg = qwk({0, 0}, {0, 0}, {0, 4});
    CHECK(deg.value == 1.0);
    CHECK(deg.degenerate);
    // Constant but unequal lists resolve through the normal path to 0.
    CHECK(qwk({1, 1}, {3, 3}, {0, 4}).value == doctest::Approx(0.0));
    CHECK_THROWS_AS(qwk({}, {}, {0, 2}), std::invalid_argument);
    CHECK_THROWS_AS(qwk({0}, {0, 1}, {0, 2}), std::invalid_argument);
    CHECK_THROWS_AS(qwk({0, 5}, {0, 1}, {0, 2}), std::invalid_argument);
}

TEST_CASE("qwk matches brute-force oracle on 1000+ random sets") {
    std::mt19937_64 rng(20240817);
    auto start = std::chrono::steady_clock::now();
    for (int iter = 0; iter < 1200; ++iter) {
        std::uniform_int_distribution<int> n_dist(1, 50);
        std::uniform_int_distribution<int> range_dist(2, 13);
        std::uniform_int_distribution<int> lo_dist(-3, 5);
        int n = n_dist(rng);
        int lo = lo_dist(rng);
        int hi = lo + range_dist(rng) - 1;
        std::uniform_int_distribution<int> val(lo, hi);
        std::vector<int> gold(n), pred(n);
        for (int i = 0; i < n; ++i) {
            gold[i] = val(rng);
            pred[i] = val(rng);
        }
        double mine = qwk(gold, pred, {lo, hi}).value;
        double ref = oracle::qwk_bruteforce(gold, pred, lo, hi);
        CHECK(std::abs(mine - ref) < 1e-9);
    }
    auto elapsed = std::chrono::steady_clock::now() - start;
    CHECK(std::chrono::duration_cast<std::chrono::seconds>(elapsed).count() < 10);
}

TEST_CASE("qwk properties") {
    std::mt19937_64 rng(77);
    for (int iter = 0; iter < 200; ++iter) {
        std::uniform_int_distribution<int> n_dist(2, 30);
        int n = n_dist(rng);
        std::uniform_int_distribution<int> val(0, 6);
        std::vector<int> gold(n), pred(n);
        for (int i = 0; i < n; ++i) {
            gold[i] = val(rng);
            pred[i] = val(rng);
        }
        ScoreRange r{0, 6};
        QwkOutcome self = qwk(gold, gold, r);
        CHECK(self.value == 1.0);
        double ab = qwk(gold, pred, r).value;
        double ba = qwk(pred, gold, r).value;
        CHECK(ab == doctest::Approx(ba).epsilon(1e-12));
        CHECK(ab <= 1.0);
        if (gold != pred) CHECK(ab < 1.0);
        // Shifting both lists and the range leaves the value unchanged.
        std::vector<int> gold_s(gold), pred_s(pred);
        for (auto& v : gold_s) v += 3;
        for (auto& v : pred_s) v += 3;
        CHECK(qwk(gold_s, pred_s, {3, 9}).value == doctest::Approx(ab).epsilon(1e-12));
    }
}

TEST_CASE("batch qwk flattens scored pairs") {
    Schema s = schema();
    std::vector<TraitScoreVector> gold, pred;
    gold.push_back(vec(s, {{"over", 3}, {"cont", 2}, {"pa", 1}, {"lang", 0}, {"nar", 2}}));
    pred.push_back(gold.back());
    gold.push_back(vec(s, {{"over", 1}, {"cont", 1}, {"pa", 1}, {"lang", 1}, {"nar", 1}}));
    pred.push_back(gold.back());
    QwkOutcome out = batch_qwk(gold, pred, ScoreRange{0, 3});
    CHECK(out.value == 1.0);

    // Random mixed batch equals the oracle on the flattened list.
    std::mt19937_64 rng(5);
    std::vector<TraitScoreVector> g2, p2;
    std::vector<int> flat_g, flat_p;
    std::uniform_int_distribution<int> val(0, 4);
    for (int i = 0; i < 8; ++i) {
        TraitScoreVector g(trait_prediction_order(s)), p(trait_prediction_order(s));
        for (const auto& t : s.prompt(5).traits) {
            int gv = val(rng), pv = val(rng);
            g.set(t, gv);
            p.set(t, pv);
            flat_g.push_back(gv);
            flat_p.push_back(pv);
        }
        g2.push_back(g);
        p2.push_back(p);
    }
    double mine = batch_qwk(g2, p2, {0, 4}).value;
    CHECK(std::abs(mine - oracle::qwk_bruteforce(flat_g, flat_p, 0, 4)) < 1e-12);
}

TEST_CASE("batch qwk substitutes worst case for missing predictions") {
    Schema s = schema();
    std::vector<TraitScoreVector> gold{vec(s, {{"over", 3}, {"cont", 0}})};
    std::vector<TraitScoreVector> pred{TraitScoreVector(trait_prediction_order(s))};
    // gold 3 > midpoint 1.5 -> pred lo = 0; gold 0 <= midpoint -> pred hi = 3.
    double v = batch_qwk(gold, pred, {0, 3}).value;
    CHECK(v == doctest::Approx(oracle::qwk_bruteforce({3, 0}, {0, 3}, 0, 3)).epsilon(1e-12));

    std::vector<TraitScoreVector> empty_gold{TraitScoreVector(trait_prediction_order(s))};
    QwkOutcome deg = batch_qwk(empty_gold, pred, {0, 3});
    CHECK(deg.value == 0.0);
    CHECK(deg.degenerate);
}

TEST_CASE("trait qwk over one sample") {
    Schema s = schema();
    auto g = vec(s, {{"over", 8}, {"cont", 4}, {"org", 3}, {"wc", 5}, {"sf", 2}, {"conv", 1}});
    CHECK(trait_qwk(g, g, s.prompt(1).pooled_range()).value == 1.0);

    // Single scored trait: degenerate rule.
    auto one = vec(s, {{"over", 2}});
    auto one_same = vec(s, {{"over", 2}});
    auto one_diff = vec(s, {{"over", 3}});
    CHECK(trait_qwk(one, one_same, {0, 4}).value == 1.0);
    CHECK(trait_qwk(one, one_same, {0, 4}).degenerate);
    CHECK(trait_qwk(one, one_diff, {0, 4}).value == 0.0);

    // P1 sample against the oracle on its 6 trait pairs (pooled 1..12).
    std::mt19937_64 rng(9);
    auto universe = trait_prediction_order(s);
    TraitScoreVector pg(universe), pp(universe);
    std::vector<int> fg, fp;
    for (const auto& t : s.prompt(1).traits) {
        const ScoreRange& r = s.prompt(1).range_of(t);
        std::uniform_int_distribution<int> val(r.lo, r.hi);
        int gv = val(rng), pv = val(rng);
        pg.set(t, gv);
        pp.set(t, pv);
        fg.push_back(gv);
        fp.push_back(pv);
    }
    ScoreRange pooled = s.prompt(1).pooled_range();
    CHECK(pooled.lo == 1);
    CHECK(pooled.hi == 12);
    double mine = trait_qwk(pg, pp, pooled).value;
    CHECK(std::abs(mine - oracle::qwk_bruteforce(fg, fp, pooled.lo, pooled.hi)) < 1e-12);
}

TEST_CASE("mse reward identities and worked example") {
    Schema s = schema();
    auto universe = trait_prediction_order(s);

    std::vector<TraitScoreVector> gold, pred;
    gold.push_back(vec(s, {{"over", 3}, {"cont", 2}}));
    pred.push_back(gold.back());
    CHECK(mse_reward(gold, pred, {0, 4}).value == 0.0);

    // Two traits, two samples: per-sample (t1, t2) gold (3,4) and (1,2),
    // pred (3,2) and (1,2). Trait-1 errors are 0; trait-2 RMSE is sqrt(2).
    std::vector<TraitScoreVector> g2, p2;
    g2.push_back(vec(s, {{"cont", 3}, {"org", 4}}));
    g2.push_back(vec(s, {{"cont", 1}, {"org", 2}}));
    p2.push_back(vec(s, {{"cont", 3}, {"org", 2}}));
    p2.push_back(vec(s, {{"cont", 1}, {"org", 2}}));
    double r = mse_reward(g2, p2, {0, 6}).value;
    CHECK(std::abs(r - (-std::sqrt(2.0) / 2.0)) < 1e-12);

    // One trait off by the full range width r on every sample: that trait
    // contributes exactly -r/m.
    std::vector<TraitScoreVector> g3, p3;
    g3.push_back(vec(s, {{"cont", 0}, {"org", 2}}));
    g3.push_back(vec(s, {{"cont", 0}, {"org", 2}}));
    p3.push_back(vec(s, {{"cont", 4}, {"org", 2}}));
    p3.push_back(vec(s, {{"cont", 4}, {"org", 2}}));
    CHECK(mse_reward(g3, p3, {0, 4}).value == doctest::Approx(-4.0 / 2.0).epsilon(1e-12));

    std::vector<TraitScoreVector> nog{TraitScoreVector(universe)};
    std::vector<TraitScoreVector> nop{TraitScoreVector(universe)};
    MseOutcome empty = mse_reward(nog, nop, {0, 4});
    CHECK(empty.value == 0.0);
    CHECK(empty.empty);
    CHECK(mse_reward(g3, p3, {0, 4}).value <= 0.0);
}

TEST_CASE("resolve_predictions substitutes farthest endpoint") {
    Schema s = schema();
    const PromptSpec& p5 = s.prompt(5); // traits 0..4
    auto gold = vec(s, {{"over", 4}, {"cont", 1}, {"pa", 2}, {"lang", 3}, {"nar", 0}});
    TraitScoreVector pred(trait_prediction_order(s));
    pred.set("pa", 2); // only one trait predicted
    TraitScoreVector r = resolve_predictions(pred, gold, p5);
    CHECK(r.get("pa") == 2);       // passthrough
    CHECK(r.get("over") == 0);     // gold 4 > mid 2 -> lo
    CHECK(r.get("cont") == 4);     // gold 1 < mid -> hi
    CHECK(r.get("lang") == 0);     // gold 3 > mid -> lo
    CHECK(r.get("nar") == 4);      // gold 0 -> hi
    CHECK_FALSE(r.get("voice").has_value()); // gold unset stays unset
    // gold exactly at midpoint goes to hi ("lo only if gold > midpoint")
    auto gold_mid = vec(s, {{"over", 2}});
    TraitScoreVector none(trait_prediction_order(s));
    CHECK(resolve_predictions(none, gold_mid, p5).get("over") == 4);
}

TEST_CASE("compute_rewards bundle identities") {
    Schema s = schema();
    RewardInputs in;
    std::mt19937_64 rng(13);
    for (int i = 0; i < 6; ++i) {
        int pid = 1 + static_cast<int>(rng() % 8);
        const PromptSpec& prompt = s.prompt(pid);
        TraitScoreVector g(trait_prediction_order(s));
        for (const auto& t : prompt.traits) {
            const ScoreRange& r = prompt.range_of(t);
            std::uniform_int_distribution<int> val(r.lo, r.hi);
            g.set(t, val(rng));
        }
        in.prompt_ids.push_back(pid);
        in.gold.push_back(g);
        in.pred.push_back(g); // perfect predictions
    }
    RewardBundle perfect = compute_rewards(in, s, 0.5);
    CHECK(perfect.q_b == 1.0);
    CHECK(perfect.r_m == 0.0);
    for (std::size_t i = 0; i < in.gold.size(); ++i) {
        CHECK(perfect.q_t[i] == 1.0);
        CHECK(perfect.r_q[i] == 1.0);
        CHECK(perfect.q_t_defined[i]);
    }

    // Degrade some predictions, then check the lambda mixture is affine
    // between its endpoints and internally consistent.
    RewardInputs noisy = in;
    for (std::size_t i = 0; i < noisy.pred.size(); i += 2) {
        const PromptSpec& prompt = s.prompt(noisy.prompt_ids[i]);
        const TraitId& t = prompt.traits[1];
        const ScoreRange& r = prompt.range_of(t);
        int g = *noisy.gold[i].get(t);
        noisy.pred[i].set(t, g == r.lo ? r.hi : r.lo);
    }
    RewardBundle b0 = compute_rewards(noisy, s, 0.0);
    RewardBundle b1 = compute_rewards(noisy, s, 1.0);
    RewardBundle bl = compute_rewards(noisy, s, 0.3);
    for (std::size_t i = 0; i < noisy.gold.size(); ++i) {
        CHECK(b0.r_q[i] == doctest::Approx(b0.q_t[i]).epsilon(1e-12));
        CHECK(b1.r_q[i] == doctest::Approx(b1.q_b).epsilon(1e-12));
        double affine = 0.3 * b1.r_q[i] + 0.7 * b0.r_q[i];
        CHECK(bl.r_q[i] == doctest::Approx(affine).epsilon(1e-12));
        CHECK(bl.r_q[i] ==
              doctest::Approx(bl.lambda * bl.q_b + (1 - bl.lambda) * bl.q_t[i]).epsilon(1e-12));
        CHECK(bl.q_t[i] <= 1.0);
    }
    CHECK(bl.q_b <= 1.0);
    CHECK(bl.r_m <= 0.0);
    CHECK_THROWS_AS(compute_rewards(noisy, s, 1.5), std::invalid_argument);
}

TEST_CASE("evaluation report structure and cell consistency") {
    Schema s = schema();
    auto universe = trait_prediction_order(s);
    std::mt19937_64 rng(31);
    std::vector<EvalSample> samples;
    for (int pid = 1; pid <= 8; ++pid) {
        const PromptSpec& prompt = s.prompt(pid);
        for (int i = 0; i < 12; ++i) {
            EvalSample smp;
            smp.prompt_id = pid;
            smp.gold = TraitScoreVector(universe);
            smp.pred = TraitScoreVector(universe);
            for (const auto& t : prompt.traits) {
                const ScoreRange& r = prompt.range_of(t);
                std::uniform_int_distribution<int> val(r.lo, r.hi);
                smp.gold.set(t, val(rng));
                smp.pred.set(t, val(rng));
            }
            smp.parse_ok = (i % 6) != 5;
            samples.push_back(smp);
        }
    }
    EvaluationReport rep = evaluate_report(samples, s);
    CHECK(rep.sample_count == 96);
    CHECK(rep.parse_failure_rate == doctest::Approx(16.0 / 96.0).epsilon(1e-12));
    CHECK(rep.trait_columns.size() == universe.size());
    CHECK(rep.trait_columns.front() == "over"); // reversed prediction order
    CHECK(rep.trait_columns.back() == "voice");

    // Cells match direct qwk calls on the cell's filtered pairs.
    for (const auto& [trait, cells] : rep.trait_prompt_qwk) {
        for (const auto& [pid, value] : cells) {
            std::vector<int> fg, fp;
            for (const auto& smp : samples) {
                if (smp.prompt_id != pid) continue;
                if (!smp.gold.get(trait).has_value()) continue;
                fg.push_back(*smp.gold.get(trait));
                fp.push_back(*smp.pred.get(trait));
            }
            double direct = qwk(fg, fp, s.prompt(pid).range_of(trait)).value;
            CHECK(std::abs(direct - value) < 1e-12);
        }
    }

    // Perfect predictions: every cell and average is 1.
    for (auto& smp : samples) {
        smp.pred = smp.gold;
        smp.parse_ok = true;
    }
    EvaluationReport perfect = evaluate_report(samples, s);
    CHECK(perfect.average_qwk == doctest::Approx(1.0).epsilon(1e-12));
    for (const auto& [_, cells] : perfect.trait_prompt_qwk)
        for (const auto& [__, v] : cells) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(perfect.parse_failure_rate == 0.0);

    CHECK_THROWS_AS(evaluate_report({}, s), std::invalid_argument);
}

TEST_CASE("report serialization round trip and csv layout") {
    Schema s = schema();
    auto universe = trait_prediction_order(s);
    std::vector<EvalSample> samples;
    std::mt19937_64 rng(41);
    for (int pid : {1, 3, 7}) {
        const PromptSpec& prompt = s.prompt(pid);
        for (int i = 0; i < 10; ++i) {
            EvalSample smp;
            smp.prompt_id = pid;
            smp.gold = TraitScoreVector(universe);
            smp.pred = TraitScoreVector(universe);
            for (const auto& t : prompt.traits) {
                const ScoreRange& r = prompt.range_of(t);
                std::uniform_int_distribution<int> val(r.lo, r.hi);
                smp.gold.set(t, val(rng));
                smp.pred.set(t, val(rng));
            }
            samples.push_back(smp);
        }
    }
    EvaluationReport rep = evaluate_report(samples, s);
    json j = report_to_json(rep);
    CHECK(j.at("traits").size() == universe.size());
    EvaluationReport back = report_from_json(j);
    CHECK(back.average_qwk == rep.average_qwk);
    CHECK(back.trait_prompt_qwk == rep.trait_prompt_qwk);
    CHECK(back.prompt_avg == rep.prompt_avg);
    CHECK(report_to_json(back) == j);

    std::string tcsv = report_trait_csv({{"modelA", rep}});
    CHECK(tcsv.find("model,over,") == 0);
    CHECK(tcsv.find(",avg\n") != std::string::npos);
    std::string pcsv = report_prompt_csv({{"modelA", rep}});
    CHECK(pcsv.find("model,p1,p3,p7,avg\n") == 0);
}
