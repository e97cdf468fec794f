#pragma once

// Sequence policy built on the encoder-decoder model: generation,
// teacher-forced scoring, supervised pretraining, checkpoints.

#include <cstdint>
#include <string>
#include <vector>

#include "aeslab/corpus.hpp"
#include "aeslab/metrics.hpp"
#include "aeslab/model.hpp"
#include "aeslab/util.hpp"
#include "aeslab/vocab.hpp"

namespace aeslab {

struct GenerationOutput {
    std::vector<int> tokens;       // generated tokens, eos included when terminated
    std::vector<double> logprobs;  // log-prob of each generated token at decode time
    Mat values;                    // (T x n_value_channels) value-head outputs per step
    bool terminated = false;       // eos reached within max_len
};

enum class DecodeMode { Greedy, Sampled };

struct GenerateOptions {
    DecodeMode mode = DecodeMode::Greedy;
    double temperature = 1.0;
    int max_len = 0;
    std::uint64_t seed = 0;
    int bos = -1;
    int eos = -1;
};

// Autoregressive decode. Greedy ignores temperature and seed; sampled mode is
// reproducible from the seed. Truncation at max_len leaves terminated=false.
GenerationOutput generate(const Model& m, const std::vector<int>& enc_tokens,
                          const GenerateOptions& opt);

struct SequenceScore {
    std::vector<double> logprobs;  // teacher-forced log p(target_t | enc, target_<t)
    Mat values;                    // (T x n_value_channels)
};

// Teacher-forced re-scoring of `target` (typically a generated sequence,
// eos included). Decoder input is [bos, target_0 .. target_{T-2}].
SequenceScore token_logprobs(const Model& m, const std::vector<int>& enc_tokens,
                             const std::vector<int>& target, int bos);

// Same computation with everything the backward pass needs kept around.
struct ScoredForward {
    EncoderCache ec;
    DecoderCache dc;
    Mat logits;                    // (T x V)
    Mat logprobs_full;             // (T x V) row-wise log-softmax of logits
    std::vector<double> target_logprobs;
    Mat values;                    // (T x n_value_channels)
    std::vector<int> dec_input;
    std::vector<int> targets;
};

ScoredForward forward_scored(const Model& m, const std::vector<int>& enc_tokens,
                             const std::vector<int>& target, int bos);

// Mean-per-token cross entropy of logits against targets, with gradient.
struct CeLossResult {
    double loss = 0.0;
    Mat d_logits;  // d(loss)/d(logits), already divided by T
};
CeLossResult ce_loss(const Mat& logits, const std::vector<int>& targets);

// Adam over externally owned (value, grad) tensor pairs. Moment slots are
// allocated in registration order, so attach everything before stepping.
class AdamOptimizer {
  public:
    explicit AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999,
                           double eps = 1e-8);
    void attach(Model& m);
    void attach(Mat& value, Mat& grad);
    void step();
    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    int steps_taken() const { return t_; }

  private:
    struct Slot {
        Mat* value;
        Mat* grad;
        Mat m;
        Mat v;
    };
    std::vector<Slot> slots_;
    double lr_, beta1_, beta2_, eps_;
    int t_ = 0;
};

struct PretrainConfig {
    int epochs = 15;
    int batch_size = 4;
    double lr = 1e-3;
    int patience = 2;        // dev evaluations without improvement before stopping
    int eval_interval = 200; // optimizer steps between dev evaluations
    double dev_fraction = 0.1;
    std::uint64_t seed = 1;
    ModelConfig model;

    void validate() const;
    json to_json() const;
    static PretrainConfig from_json(const json& j);
};

struct PretrainResult {
    Model model;             // best-on-dev parameters
    std::vector<json> curve; // one row per dev evaluation
    double best_dev_ce = 0.0;
    int steps_taken = 0;
    int dev_size = 0;
    int train_size = 0;
};

// Supervised cross-entropy pretraining on serialized targets. Essays whose
// fold equals exclude_fold are left out entirely (pass -1 to train on all).
// A dev split is carved deterministically from the remaining pool; the best
// parameters by dev cross-entropy are returned. Non-finite losses abort.
PretrainResult supervised_train(const Corpus& corpus, const Vocabulary& vocab,
                                const PretrainConfig& cfg, int exclude_fold);

// Deep copy intended to stay frozen (the caller must simply not train it).
Model clone_frozen(const Model& m);

// Greedy-decode every essay and score the parsed predictions.
EvaluationReport evaluate_policy(const Model& m, const Schema& schema, const Vocabulary& vocab,
                                 const std::vector<const EssayRecord*>& essays);

std::vector<const EssayRecord*> essays_in_fold(const Corpus& corpus, int fold);
std::vector<const EssayRecord*> essays_outside_fold(const Corpus& corpus, int fold);

struct CheckpointMeta {
    std::uint64_t schema_hash = 0;
    std::uint64_t vocab_hash = 0;
    json hyperparams;        // arbitrary run metadata (config, rng state, ...)
};

void save_checkpoint(const std::string& path, const Model& m, const CheckpointMeta& meta);

// expect_schema_hash / expect_vocab_hash of 0 skip the corresponding check;
// any other mismatch throws.
Model load_checkpoint(const std::string& path, std::uint64_t expect_schema_hash,
                      std::uint64_t expect_vocab_hash, CheckpointMeta* meta_out = nullptr);

} // namespace aeslab
