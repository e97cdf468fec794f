#include "aeslab/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace aeslab {

void TrainerConfig::validate() const {
    if (!(gamma > 0.0) || gamma > 1.0) throw std::invalid_argument("gamma must be in (0,1]");
    if (!(gae_lambda > 0.0) || gae_lambda > 1.0)
        throw std::invalid_argument("gae_lambda must be in (0,1]");
    if (!(clip_epsilon > 0.0)) throw std::invalid_argument("clip_epsilon must be positive");
    if (c1 < 0.0 || c2 < 0.0) throw std::invalid_argument("loss coefficients must be >= 0");
    if (beta < 0.0) throw std::invalid_argument("beta must be >= 0");
    if (lambda_q < 0.0 || lambda_q > 1.0) throw std::invalid_argument("lambda_q must be in [0,1]");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (ppo_epochs < 1) throw std::invalid_argument("ppo_epochs must be >= 1");
    if (updates < 0) throw std::invalid_argument("updates must be >= 0");
    if (!(rl_step_size > 0.0)) throw std::invalid_argument("rl_step_size must be positive");
    if (checkpoint_every < 0) throw std::invalid_argument("checkpoint_every must be >= 0");
}

json TrainerConfig::to_json() const {
    return json{{"gamma", gamma},
                {"gae_lambda", gae_lambda},
                {"clip_epsilon", clip_epsilon},
                {"c1", c1},
                {"c2", c2},
                {"beta", beta},
                {"lambda_q", lambda_q},
                {"batch_size", batch_size},
                {"ppo_epochs", ppo_epochs},
                {"updates", updates},
                {"rl_step_size", rl_step_size},
                {"seed", seed},
                {"kl_at_terminal", kl_at_terminal},
                {"qt_mode", qt_mode == QtRangeMode::PromptPooled ? "prompt" : "schema"},
                {"checkpoint_every", checkpoint_every}};
}

TrainerConfig TrainerConfig::from_json(const json& j) {
    TrainerConfig c;
    c.gamma = j.value("gamma", c.gamma);
    c.gae_lambda = j.value("gae_lambda", c.gae_lambda);
    c.clip_epsilon = j.value("clip_epsilon", c.clip_epsilon);
    c.c1 = j.value("c1", c.c1);
    c.c2 = j.value("c2", c.c2);
    c.beta = j.value("beta", c.beta);
    c.lambda_q = j.value("lambda_q", c.lambda_q);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.ppo_epochs = j.value("ppo_epochs", c.ppo_epochs);
    c.updates = j.value("updates", c.updates);
    c.rl_step_size = j.value("rl_step_size", c.rl_step_size);
    c.seed = j.value("seed", c.seed);
    c.kl_at_terminal = j.value("kl_at_terminal", c.kl_at_terminal);
    std::string mode = j.value("qt_mode", "prompt");
    if (mode == "prompt")
        c.qt_mode = QtRangeMode::PromptPooled;
    else if (mode == "schema")
        c.qt_mode = QtRangeMode::SchemaPooled;
    else
        throw std::invalid_argument("unknown qt_mode: " + mode);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.validate();
    return c;
}

CollectResult collect_rollouts(const Model& policy, const Model& anchor,
                               const std::vector<const EssayRecord*>& batch,
                               const Schema& schema, const Vocabulary& vocab,
                               const TrainerConfig& cfg, std::uint64_t batch_seed) {
    if (batch.empty()) throw std::invalid_argument("empty rollout batch");
    const std::vector<TraitId> order = trait_prediction_order(schema);

    GenerateOptions opt;
    opt.mode = DecodeMode::Sampled;
    opt.temperature = 1.0;
    opt.max_len = policy.cfg.max_dec_len;
    opt.bos = vocab.bos_id();
    opt.eos = vocab.eos_id();

    CollectResult out;
    RewardInputs inputs;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const EssayRecord* e = batch[i];
        opt.seed = derive_seed(batch_seed, std::to_string(i));
        GenerationOutput g = generate(policy, e->tokens, opt);

        Rollout r;
        r.essay = e;
        r.tokens = g.tokens;
        r.terminated = g.terminated;
        // Collection-time log-probs come from the same teacher-forced pass
        // used for the anchor, so identical parameters give identical values.
        SequenceScore pol = token_logprobs(policy, e->tokens, g.tokens, opt.bos);
        SequenceScore anc = token_logprobs(anchor, e->tokens, g.tokens, opt.bos);
        r.policy_logprobs = std::move(pol.logprobs);
        r.values = std::move(pol.values);
        r.anchor_logprobs = std::move(anc.logprobs);
        r.parsed = parse_scores(g.tokens, schema.prompt(e->prompt_id), vocab, order);

        inputs.prompt_ids.push_back(e->prompt_id);
        inputs.gold.push_back(e->gold);
        inputs.pred.push_back(r.parsed.scores);
        out.rollouts.push_back(std::move(r));
    }
    out.bundle = compute_rewards(inputs, schema, cfg.lambda_q, cfg.qt_mode);
    return out;
}

std::vector<double> shaped_stream(const std::vector<double>& policy_logprobs,
                                  const std::vector<double>& anchor_logprobs,
                                  double terminal_reward, double beta, bool kl_at_terminal) {
    if (policy_logprobs.size() != anchor_logprobs.size())
        throw std::logic_error("policy/anchor log-prob length mismatch");
    if (policy_logprobs.empty()) throw std::logic_error("empty rollout stream");
    const std::size_t T = policy_logprobs.size();
    std::vector<double> stream(T, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        bool terminal = (t == T - 1);
        double kl = policy_logprobs[t] - anchor_logprobs[t];
        if (!terminal || kl_at_terminal) stream[t] = -beta * kl;
        if (terminal) stream[t] += terminal_reward;
    }
    return stream;
}

void shape_rewards(std::vector<Rollout>& rollouts, const RewardBundle& bundle,
                   const TrainerConfig& cfg) {
    if (rollouts.size() != bundle.r_q.size())
        throw std::logic_error("reward bundle does not match rollout batch");
    for (std::size_t i = 0; i < rollouts.size(); ++i) {
        Rollout& r = rollouts[i];
        r.terminal_q = bundle.r_q[i];
        r.terminal_m = bundle.r_m;
        r.shaped_q = shaped_stream(r.policy_logprobs, r.anchor_logprobs, r.terminal_q, cfg.beta,
                                   cfg.kl_at_terminal);
        r.shaped_m = shaped_stream(r.policy_logprobs, r.anchor_logprobs, r.terminal_m, cfg.beta,
                                   cfg.kl_at_terminal);
    }
}

Advantages gae(const std::vector<double>& rewards, const std::vector<double>& values,
               double gamma, double gae_lambda) {
    if (rewards.empty()) throw std::invalid_argument("gae on an empty episode");
    if (rewards.size() != values.size())
        throw std::invalid_argument("gae rewards/values length mismatch");
    const std::size_t T = rewards.size();
    Advantages a;
    a.adv.resize(T);
    a.ret.resize(T);
    double running = 0.0;
    for (std::size_t t = T; t-- > 0;) {
        double v_next = (t + 1 < T) ? values[t + 1] : 0.0;
        double delta = rewards[t] + gamma * v_next - values[t];
        running = delta + gamma * gae_lambda * running;
        a.adv[t] = running;
        a.ret[t] = running + values[t];
    }
    return a;
}

void normalize_advantages(std::vector<Advantages>& per_rollout) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& a : per_rollout) {
        for (double v : a.adv) sum += v;
        n += a.adv.size();
    }
    if (n == 0) return;
    double mean = sum / static_cast<double>(n);
    double var = 0.0;
    for (const auto& a : per_rollout)
        for (double v : a.adv) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    double inv_sd = var > 1e-12 ? 1.0 / std::sqrt(var) : 1.0;
    for (auto& a : per_rollout)
        for (double& v : a.adv) v = (v - mean) * inv_sd;
}

ChannelLossResult ppo_channel_loss(const std::vector<Rollout>& rollouts,
                                   const std::vector<Advantages>& advantages,
                                   const std::vector<ScoredForward>& fresh, int channel,
                                   const TrainerConfig& cfg) {
    if (rollouts.size() != advantages.size() || rollouts.size() != fresh.size())
        throw std::logic_error("ppo_channel_loss batch arrays misaligned");
    if (channel != kChannelQ && channel != kChannelM)
        throw std::invalid_argument("unknown reward channel");

    ChannelLossResult res;
    res.d_logits.resize(rollouts.size());
    res.d_values.resize(rollouts.size());

    // First pass: find usable rollouts and the flat token count.
    std::vector<bool> usable(rollouts.size(), true);
    std::size_t total_tokens = 0;
    for (std::size_t i = 0; i < rollouts.size(); ++i) {
        const Rollout& r = rollouts[i];
        const ScoredForward& f = fresh[i];
        for (std::size_t t = 0; t < r.tokens.size(); ++t) {
            double ratio = std::exp(f.target_logprobs[t] - r.policy_logprobs[t]);
            if (!std::isfinite(ratio)) {
                usable[i] = false;
                break;
            }
        }
        if (usable[i])
            total_tokens += r.tokens.size();
        else
            ++res.skipped;
    }
    if (total_tokens == 0) {
        for (std::size_t i = 0; i < rollouts.size(); ++i) {
            res.d_logits[i] = Mat::Zero(fresh[i].logits.rows(), fresh[i].logits.cols());
            res.d_values[i] = Mat::Zero(fresh[i].values.rows(), fresh[i].values.cols());
        }
        return res;
    }
    const double inv_s = 1.0 / static_cast<double>(total_tokens);

    for (std::size_t i = 0; i < rollouts.size(); ++i) {
        const Rollout& r = rollouts[i];
        const ScoredForward& f = fresh[i];
        Mat dl = Mat::Zero(f.logits.rows(), f.logits.cols());
        Mat dv = Mat::Zero(f.values.rows(), f.values.cols());
        if (usable[i]) {
            for (std::size_t t = 0; t < r.tokens.size(); ++t) {
                const Eigen::Index ti = static_cast<Eigen::Index>(t);
                Eigen::RowVectorXd logp = f.logprobs_full.row(ti);
                Eigen::RowVectorXd p = logp.array().exp();
                const int a_tok = r.tokens[t];
                const double adv = advantages[i].adv[t];
                const double ratio = std::exp(f.target_logprobs[t] - r.policy_logprobs[t]);

                // Clipped surrogate; ties resolve to the unclipped branch so
                // the clip_epsilon -> 0 limit reproduces the plain estimator.
                const double unclipped = ratio * adv;
                const double clipped =
                    std::clamp(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) * adv;
                res.surrogate -= std::min(unclipped, clipped) * inv_s;
                if (unclipped <= clipped) {
                    // d(-ratio*adv)/d logit_j = -ratio*adv*(1{j=a} - p_j)
                    double coeff = -ratio * adv * inv_s;
                    dl.row(ti) += coeff * (-p);
                    dl(ti, a_tok) += coeff;
                }

                // Value loss against unnormalized returns.
                double verr = f.values(ti, channel) - advantages[i].ret[t];
                res.vf += verr * verr * inv_s;
                dv(ti, channel) += cfg.c1 * 2.0 * verr * inv_s;

                // Entropy bonus.
                double h = -(p.array() * logp.array()).sum();
                res.entropy += h * inv_s;
                // d(-c2*H)/d logit_j = c2 * p_j * (logp_j + H)
                dl.row(ti) += (cfg.c2 * inv_s) * (p.array() * (logp.array() + h)).matrix();
            }
        }
        res.d_logits[i] = std::move(dl);
        res.d_values[i] = std::move(dv);
    }
    res.total = res.surrogate + cfg.c1 * res.vf - cfg.c2 * res.entropy;
    return res;
}

std::pair<double, double> LossWeights::normalized() const {
    if (!learned) return {fixed_wq, fixed_wm};
    double m = std::max(raw(0, 0), raw(1, 0));
    double e0 = std::exp(raw(0, 0) - m);
    double e1 = std::exp(raw(1, 0) - m);
    double z = e0 + e1;
    return {e0 / z, e1 / z};
}

CombinedLoss combine_losses(double loss_q, double loss_m, LossWeights& w) {
    CombinedLoss out;
    auto [wq, wm] = w.normalized();
    out.w_q = wq;
    out.w_m = wm;
    out.total = wq * loss_q + wm * loss_m;
    if (w.learned) {
        // d total / d raw_i = w_i * (loss_i - total) for softmax weights.
        w.raw_grad(0, 0) += wq * (loss_q - out.total);
        w.raw_grad(1, 0) += wm * (loss_m - out.total);
        out.collapse_alarm = (wq <= 0.02 || wq >= 0.98);
    }
    return out;
}

namespace {

// Copies parameter values without touching the destination's layer vectors,
// so tensor addresses registered with an optimizer stay valid.
void copy_params_into(const Model& src, Model& dst) {
    std::vector<const Mat*> vals;
    src.for_each_param_const(
        [&](const std::string&, const Mat& v, const Mat&) { vals.push_back(&v); });
    std::size_t i = 0;
    dst.for_each_param([&](const std::string&, Mat& v, Mat&) { v = *vals[i++]; });
}

} // namespace

ChannelConfig resolve_variant(const std::string& variant, const TrainerConfig& cfg) {
    ChannelConfig c;
    c.name = variant;
    c.lambda_q = cfg.lambda_q;
    if (variant == "samrl-biq") {
        return c;
    }
    if (variant == "samrl-uniqt") {
        c.lambda_q = 0.0;
        return c;
    }
    if (variant == "samrl-uniqb") {
        c.lambda_q = 1.0;
        return c;
    }
    if (variant == "sasrl-m" || variant == "sasrl-q" || variant.rfind("fixed:", 0) == 0) {
        double wq, wm;
        if (variant == "sasrl-m") {
            wq = 0.0;
            wm = 1.0;
        } else if (variant == "sasrl-q") {
            wq = 1.0;
            wm = 0.0;
        } else {
            std::string rest = variant.substr(6);
            auto comma = rest.find(',');
            if (comma == std::string::npos)
                throw std::invalid_argument("fixed variant needs fixed:WQ,WM");
            try {
                wq = std::stod(rest.substr(0, comma));
                wm = std::stod(rest.substr(comma + 1));
            } catch (const std::exception&) {
                throw std::invalid_argument("could not parse fixed weights in " + variant);
            }
            if (wq < 0.0 || wm < 0.0 || wq + wm <= 0.0)
                throw std::invalid_argument("fixed weights must be nonnegative, not both 0");
            double z = wq + wm;
            wq /= z;
            wm /= z;
        }
        c.learn_weights = false;
        c.fixed_wq = wq;
        c.fixed_wm = wm;
        c.q_enabled = wq != 0.0;
        c.m_enabled = wm != 0.0;
        return c;
    }
    throw std::invalid_argument("unknown RL variant: " + variant +
                                " (baseline is trained without RL)");
}

RlResult train_rl(const Model& pretrained, const Model& anchor, const Corpus& corpus,
                  const Vocabulary& vocab, const TrainerConfig& cfg, const std::string& variant,
                  int exclude_fold, const CheckpointFn& on_checkpoint) {
    cfg.validate();
    ChannelConfig channel = resolve_variant(variant, cfg);
    TrainerConfig eff = cfg;
    eff.lambda_q = channel.lambda_q;

    std::vector<const EssayRecord*> pool = essays_outside_fold(corpus, exclude_fold);
    if (pool.empty()) throw std::invalid_argument("no essays available for RL training");

    RlResult res;
    res.policy = pretrained;
    res.weights.learned = channel.learn_weights;
    res.weights.fixed_wq = channel.fixed_wq;
    res.weights.fixed_wm = channel.fixed_wm;

    AdamOptimizer opt(eff.rl_step_size);
    opt.attach(res.policy);
    opt.attach(res.weights.raw, res.weights.raw_grad);

    const int bos = vocab.bos_id();
    Model last_good = res.policy;
    int non_finite_streak = 0;

    for (int update = 0; update < eff.updates; ++update) {
        // Deterministic batch draw (without replacement inside a batch).
        std::mt19937_64 brng(derive_seed(eff.seed, "batch/" + std::to_string(update)));
        std::vector<const EssayRecord*> batch;
        if (pool.size() <= static_cast<std::size_t>(eff.batch_size)) {
            batch = pool;
        } else {
            std::vector<std::size_t> idx(pool.size());
            std::iota(idx.begin(), idx.end(), 0);
            for (int k = 0; k < eff.batch_size; ++k) {
                std::uniform_int_distribution<std::size_t> pick(k, idx.size() - 1);
                std::swap(idx[static_cast<std::size_t>(k)], idx[pick(brng)]);
                batch.push_back(pool[idx[static_cast<std::size_t>(k)]]);
            }
        }

        CollectResult col =
            collect_rollouts(res.policy, anchor, batch, corpus.schema, vocab, eff,
                             derive_seed(eff.seed, "rollout/" + std::to_string(update)));
        shape_rewards(col.rollouts, col.bundle, eff);

        // Per-channel GAE on collection-time values, then batch normalization.
        std::vector<Advantages> adv_q, adv_m;
        for (const Rollout& r : col.rollouts) {
            std::vector<double> vq(r.tokens.size()), vm(r.tokens.size());
            for (std::size_t t = 0; t < r.tokens.size(); ++t) {
                vq[t] = r.values(static_cast<Eigen::Index>(t), kChannelQ);
                vm[t] = r.values(static_cast<Eigen::Index>(t), kChannelM);
            }
            if (channel.q_enabled) adv_q.push_back(gae(r.shaped_q, vq, eff.gamma, eff.gae_lambda));
            if (channel.m_enabled) adv_m.push_back(gae(r.shaped_m, vm, eff.gamma, eff.gae_lambda));
        }
        normalize_advantages(adv_q);
        normalize_advantages(adv_m);

        double last_loss_q = 0.0, last_loss_m = 0.0, last_total = 0.0;
        double last_wq = 0.0, last_wm = 0.0;
        bool alarm = false;
        int skipped = 0;
        bool bad_update = false;

        for (int epoch = 0; epoch < eff.ppo_epochs && !bad_update; ++epoch) {
            std::vector<ScoredForward> fresh;
            fresh.reserve(col.rollouts.size());
            for (const Rollout& r : col.rollouts)
                fresh.push_back(forward_scored(res.policy, r.essay->tokens, r.tokens, bos));

            ChannelLossResult lq, lm;
            if (channel.q_enabled)
                lq = ppo_channel_loss(col.rollouts, adv_q, fresh, kChannelQ, eff);
            if (channel.m_enabled)
                lm = ppo_channel_loss(col.rollouts, adv_m, fresh, kChannelM, eff);
            skipped += lq.skipped + lm.skipped;

            res.weights.raw_grad.setZero();
            CombinedLoss comb = combine_losses(channel.q_enabled ? lq.total : 0.0,
                                               channel.m_enabled ? lm.total : 0.0, res.weights);
            if (!std::isfinite(comb.total)) {
                bad_update = true;
                break;
            }

            res.policy.zero_grad();
            for (std::size_t i = 0; i < col.rollouts.size(); ++i) {
                Mat dl = Mat::Zero(fresh[i].logits.rows(), fresh[i].logits.cols());
                Mat dv = Mat::Zero(fresh[i].values.rows(), fresh[i].values.cols());
                if (channel.q_enabled) {
                    dl += comb.w_q * lq.d_logits[i];
                    dv += comb.w_q * lq.d_values[i];
                }
                if (channel.m_enabled) {
                    dl += comb.w_m * lm.d_logits[i];
                    dv += comb.w_m * lm.d_values[i];
                }
                backward(res.policy, fresh[i].ec, fresh[i].dc, dl, dv);
            }
            opt.step();

            last_loss_q = lq.total;
            last_loss_m = lm.total;
            last_total = comb.total;
            last_wq = comb.w_q;
            last_wm = comb.w_m;
            alarm = alarm || comb.collapse_alarm;
        }

        if (bad_update) {
            ++non_finite_streak;
            copy_params_into(last_good, res.policy); // roll the partial update back
            if (non_finite_streak >= 3) {
                res.aborted = true;
                res.log.push_back(json{{"update", update}, {"aborted", true}});
                break;
            }
        } else {
            non_finite_streak = 0;
            last_good = res.policy;
        }

        // Diagnostics for this update.
        double mean_shaped_q = 0.0, mean_shaped_m = 0.0, mean_kl = 0.0, mean_tq = 0.0;
        std::size_t tok_n = 0;
        int failures = 0;
        for (const Rollout& r : col.rollouts) {
            for (std::size_t t = 0; t < r.tokens.size(); ++t) {
                mean_shaped_q += r.shaped_q[t];
                mean_shaped_m += r.shaped_m[t];
                mean_kl += r.policy_logprobs[t] - r.anchor_logprobs[t];
            }
            tok_n += r.tokens.size();
            mean_tq += r.terminal_q;
            if (!r.parsed.ok) ++failures;
        }
        mean_shaped_q /= static_cast<double>(tok_n);
        mean_shaped_m /= static_cast<double>(tok_n);
        mean_kl /= static_cast<double>(tok_n);
        mean_tq /= static_cast<double>(col.rollouts.size());
        res.skipped_total += skipped;

        res.log.push_back(json{{"update", update},
                               {"mean_shaped_q", mean_shaped_q},
                               {"mean_shaped_m", mean_shaped_m},
                               {"terminal_r_q", mean_tq},
                               {"terminal_r_m", col.bundle.r_m},
                               {"mean_kl", mean_kl},
                               {"parse_failure_rate",
                                static_cast<double>(failures) /
                                    static_cast<double>(col.rollouts.size())},
                               {"w_q", last_wq},
                               {"w_m", last_wm},
                               {"loss_q", last_loss_q},
                               {"loss_m", last_loss_m},
                               {"loss_total", last_total},
                               {"skipped", skipped},
                               {"collapse_alarm", alarm},
                               {"rolled_back", bad_update}});

        if (on_checkpoint && eff.checkpoint_every > 0 && (update + 1) % eff.checkpoint_every == 0)
            on_checkpoint(update, res.policy, res.log);
    }

    if (on_checkpoint && res.aborted) on_checkpoint(eff.updates, res.policy, res.log);
    return res;
}

} // namespace aeslab
