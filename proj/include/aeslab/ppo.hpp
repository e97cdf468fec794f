#pragma once

// RL fine-tuning loop: rollout collection, KL-shaped rewards, GAE, the
// clipped surrogate per reward channel, and softmax-weighted combination.

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "aeslab/corpus.hpp"
#include "aeslab/metrics.hpp"
#include "aeslab/policy.hpp"

namespace aeslab {

struct TrainerConfig {
    double gamma = 0.99;
    double gae_lambda = 0.95;
    double clip_epsilon = 0.2;
    double c1 = 0.5;          // value-loss coefficient
    double c2 = 0.01;         // entropy coefficient
    double beta = 0.05;       // KL anchoring coefficient
    double lambda_q = 0.5;    // batch/trait mix inside r_Q
    int batch_size = 4;
    int ppo_epochs = 4;
    int updates = 300;
    double rl_step_size = 1.41e-4; // fast default; see README before lowering
    std::uint64_t seed = 1;
    bool kl_at_terminal = true;    // subtract the KL term at the final token too
    QtRangeMode qt_mode = QtRangeMode::PromptPooled;
    int checkpoint_every = 0;      // 0 disables periodic checkpoints

    void validate() const;
    json to_json() const;
    static TrainerConfig from_json(const json& j);
};

// Value-head channel indices, fixed everywhere.
inline constexpr int kChannelQ = 0;
inline constexpr int kChannelM = 1;

struct Rollout {
    const EssayRecord* essay = nullptr;
    std::vector<int> tokens;              // generated sequence (eos included if reached)
    std::vector<double> policy_logprobs;  // teacher-forced re-score at collection time
    std::vector<double> anchor_logprobs;  // anchor teacher-forced on the same tokens
    Mat values;                           // (T x 2) collection-time value estimates
    ParseResult parsed;
    bool terminated = false;
    // Filled by shape_rewards:
    double terminal_q = 0.0;
    double terminal_m = 0.0;
    std::vector<double> shaped_q;
    std::vector<double> shaped_m;
};

struct CollectResult {
    std::vector<Rollout> rollouts;
    RewardBundle bundle;
};

CollectResult collect_rollouts(const Model& policy, const Model& anchor,
                               const std::vector<const EssayRecord*>& batch,
                               const Schema& schema, const Vocabulary& vocab,
                               const TrainerConfig& cfg, std::uint64_t batch_seed);

// Single-channel shaped stream: -beta * (logpi - loganchor) at every step,
// terminal reward added at the last generated token.
std::vector<double> shaped_stream(const std::vector<double>& policy_logprobs,
                                  const std::vector<double>& anchor_logprobs,
                                  double terminal_reward, double beta, bool kl_at_terminal);

// Fills shaped_q / shaped_m (and the terminal rewards) on every rollout.
void shape_rewards(std::vector<Rollout>& rollouts, const RewardBundle& bundle,
                   const TrainerConfig& cfg);

struct Advantages {
    std::vector<double> adv;
    std::vector<double> ret; // adv + value, formed before any normalization
};

Advantages gae(const std::vector<double>& rewards, const std::vector<double>& values,
               double gamma, double gae_lambda);

// In-place batch normalization to mean 0 / unit variance over every token of
// every rollout (population variance; centering only if variance ~ 0).
void normalize_advantages(std::vector<Advantages>& per_rollout);

struct ChannelLossResult {
    double total = 0.0;     // surrogate + c1*vf - c2*entropy
    double surrogate = 0.0;
    double vf = 0.0;
    double entropy = 0.0;
    int skipped = 0;        // rollouts dropped for non-finite ratios
    std::vector<Mat> d_logits; // per rollout, d(total)/d(fresh logits)
    std::vector<Mat> d_values; // per rollout, d(total)/d(fresh values)
};

// Flat token-mean PPO loss for one reward channel over the whole batch.
// `fresh` holds the current policy's outputs on each rollout's sequence.
ChannelLossResult ppo_channel_loss(const std::vector<Rollout>& rollouts,
                                   const std::vector<Advantages>& advantages,
                                   const std::vector<ScoredForward>& fresh, int channel,
                                   const TrainerConfig& cfg);

struct LossWeights {
    bool learned = true;
    Mat raw = Mat::Zero(2, 1);      // trainable when learned
    Mat raw_grad = Mat::Zero(2, 1);
    double fixed_wq = 0.5;
    double fixed_wm = 0.5;

    std::pair<double, double> normalized() const;
};

struct CombinedLoss {
    double total = 0.0;
    double w_q = 0.0;
    double w_m = 0.0;
    bool collapse_alarm = false; // learned weight left (0.02, 0.98)
};

// Weighted sum per the multi-task objective; when weights are learned this
// also accumulates d(total)/d(raw) into w.raw_grad.
CombinedLoss combine_losses(double loss_q, double loss_m, LossWeights& w);

struct ChannelConfig {
    std::string name;
    bool q_enabled = true;
    bool m_enabled = true;
    bool learn_weights = true;
    double fixed_wq = 0.5;
    double fixed_wm = 0.5;
    double lambda_q = 0.5;
};

// Maps a variant id to its channel setup. Accepted: samrl-biq, samrl-uniqt,
// samrl-uniqb, sasrl-m, sasrl-q, fixed:WQ,WM. A fixed weight of exactly 0
// disables that channel outright. "baseline" is not an RL variant and throws.
ChannelConfig resolve_variant(const std::string& variant, const TrainerConfig& cfg);

struct RlResult {
    Model policy;
    LossWeights weights;
    std::vector<json> log;  // one row per update
    bool aborted = false;   // sustained non-finite losses
    int skipped_total = 0;
};

using CheckpointFn = std::function<void(int update, const Model&, const std::vector<json>& log)>;

RlResult train_rl(const Model& pretrained, const Model& anchor, const Corpus& corpus,
                  const Vocabulary& vocab, const TrainerConfig& cfg, const std::string& variant,
                  int exclude_fold, const CheckpointFn& on_checkpoint = nullptr);

} // namespace aeslab
