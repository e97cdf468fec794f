#include "aeslab/policy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace aeslab {

namespace {

// Row-wise log-softmax.
Eigen::RowVectorXd log_softmax_row(const Eigen::RowVectorXd& logits) {
    double mx = logits.maxCoeff();
    double lse = std::log((logits.array() - mx).exp().sum()) + mx;
    return logits.array() - lse;
}

int sample_from_row(const Eigen::RowVectorXd& logprobs, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double r = u(rng);
    double acc = 0.0;
    int last = static_cast<int>(logprobs.size()) - 1;
    for (int i = 0; i <= last; ++i) {
        acc += std::exp(logprobs(i));
        if (r < acc) return i;
    }
    return last; // rounding slack lands on the final token
}

int argmax_row(const Eigen::RowVectorXd& v) {
    Eigen::Index idx = 0;
    v.maxCoeff(&idx);
    return static_cast<int>(idx);
}

} // namespace

GenerationOutput generate(const Model& m, const std::vector<int>& enc_tokens,
                          const GenerateOptions& opt) {
    if (opt.max_len < 1) throw std::invalid_argument("max_len must be >= 1");
    if (opt.bos < 0 || opt.eos < 0) throw std::invalid_argument("bos/eos token ids required");
    if (opt.mode == DecodeMode::Sampled && !(opt.temperature > 0.0))
        throw std::invalid_argument("temperature must be positive for sampling");

    Mat enc_out = encode(m, enc_tokens, nullptr);
    DecodeState st = start_decode(m, enc_out);
    std::mt19937_64 rng(opt.seed);

    GenerationOutput out;
    out.values = Mat(opt.max_len, m.cfg.n_value_channels);
    int prev = opt.bos;
    for (int t = 0; t < opt.max_len; ++t) {
        Mat hidden = decode_step(m, st, prev);
        Eigen::RowVectorXd logits = project_logits(m, hidden).row(0);
        out.values.row(t) = project_values(m, hidden).row(0);
        int tok;
        double lp;
        if (opt.mode == DecodeMode::Greedy) {
            Eigen::RowVectorXd logp = log_softmax_row(logits);
            tok = argmax_row(logp);
            lp = logp(tok);
        } else {
            Eigen::RowVectorXd logp = log_softmax_row(logits / opt.temperature);
            tok = sample_from_row(logp, rng);
            lp = logp(tok);
        }
        out.tokens.push_back(tok);
        out.logprobs.push_back(lp);
        if (tok == opt.eos) {
            out.terminated = true;
            break;
        }
        prev = tok;
    }
    out.values.conservativeResize(static_cast<Eigen::Index>(out.tokens.size()), Eigen::NoChange);
    return out;
}

ScoredForward forward_scored(const Model& m, const std::vector<int>& enc_tokens,
                             const std::vector<int>& target, int bos) {
    if (target.empty()) throw std::invalid_argument("empty target sequence");
    ScoredForward f;
    f.targets = target;
    f.dec_input.reserve(target.size());
    f.dec_input.push_back(bos);
    f.dec_input.insert(f.dec_input.end(), target.begin(), target.end() - 1);

    encode(m, enc_tokens, &f.ec);
    decode(m, f.ec.out, f.dec_input, &f.dc);
    f.logits = project_logits(m, f.dc.hidden);
    f.values = project_values(m, f.dc.hidden);
    f.logprobs_full = Mat(f.logits.rows(), f.logits.cols());
    f.target_logprobs.resize(target.size());
    for (Eigen::Index t = 0; t < f.logits.rows(); ++t) {
        f.logprobs_full.row(t) = log_softmax_row(f.logits.row(t));
        f.target_logprobs[static_cast<std::size_t>(t)] =
            f.logprobs_full(t, target[static_cast<std::size_t>(t)]);
    }
    return f;
}

SequenceScore token_logprobs(const Model& m, const std::vector<int>& enc_tokens,
                             const std::vector<int>& target, int bos) {
    ScoredForward f = forward_scored(m, enc_tokens, target, bos);
    return SequenceScore{std::move(f.target_logprobs), std::move(f.values)};
}

CeLossResult ce_loss(const Mat& logits, const std::vector<int>& targets) {
    if (logits.rows() != static_cast<Eigen::Index>(targets.size()))
        throw std::invalid_argument("logits/targets length mismatch");
    const double inv_t = 1.0 / static_cast<double>(targets.size());
    CeLossResult r;
    r.d_logits = Mat(logits.rows(), logits.cols());
    for (Eigen::Index t = 0; t < logits.rows(); ++t) {
        Eigen::RowVectorXd logp = log_softmax_row(logits.row(t));
        int tgt = targets[static_cast<std::size_t>(t)];
        if (tgt < 0 || tgt >= logits.cols()) throw std::invalid_argument("target id out of range");
        r.loss -= logp(tgt) * inv_t;
        r.d_logits.row(t) = logp.array().exp() * inv_t;
        r.d_logits(t, tgt) -= inv_t;
    }
    return r;
}

AdamOptimizer::AdamOptimizer(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
}

void AdamOptimizer::attach(Model& m) {
    m.for_each_param([this](const std::string&, Mat& v, Mat& g) { attach(v, g); });
}

void AdamOptimizer::attach(Mat& value, Mat& grad) {
    Slot s;
    s.value = &value;
    s.grad = &grad;
    s.m = Mat::Zero(value.rows(), value.cols());
    s.v = Mat::Zero(value.rows(), value.cols());
    slots_.push_back(std::move(s));
}

void AdamOptimizer::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (Slot& s : slots_) {
        s.m = beta1_ * s.m + (1.0 - beta1_) * (*s.grad);
        s.v = beta2_ * s.v.array() + (1.0 - beta2_) * s.grad->array().square();
        s.value->array() -=
            lr_ * (s.m.array() / bc1) / ((s.v.array() / bc2).sqrt() + eps_);
    }
}

void PretrainConfig::validate() const {
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
    if (patience < 1) throw std::invalid_argument("patience must be >= 1");
    if (eval_interval < 1) throw std::invalid_argument("eval_interval must be >= 1");
    if (!(dev_fraction > 0.0) || !(dev_fraction < 1.0))
        throw std::invalid_argument("dev_fraction must be in (0,1)");
    model.validate();
}

json PretrainConfig::to_json() const {
    return json{{"epochs", epochs},
                {"batch_size", batch_size},
                {"lr", lr},
                {"patience", patience},
                {"eval_interval", eval_interval},
                {"dev_fraction", dev_fraction},
                {"seed", seed},
                {"model", model.to_json()}};
}

PretrainConfig PretrainConfig::from_json(const json& j) {
    PretrainConfig c;
    c.epochs = j.at("epochs").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.lr = j.at("lr").get<double>();
    c.patience = j.at("patience").get<int>();
    c.eval_interval = j.at("eval_interval").get<int>();
    c.dev_fraction = j.at("dev_fraction").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.model = ModelConfig::from_json(j.at("model"));
    return c;
}

std::vector<const EssayRecord*> essays_in_fold(const Corpus& corpus, int fold) {
    std::vector<const EssayRecord*> out;
    for (const auto& e : corpus.essays)
        if (e.fold == fold) out.push_back(&e);
    return out;
}

std::vector<const EssayRecord*> essays_outside_fold(const Corpus& corpus, int fold) {
    std::vector<const EssayRecord*> out;
    for (const auto& e : corpus.essays)
        if (e.fold != fold || fold < 0) out.push_back(&e);
    return out;
}

namespace {

struct PreparedSample {
    const EssayRecord* essay;
    std::vector<int> target;
};

double dev_cross_entropy(const Model& m, const std::vector<PreparedSample>& dev, int bos) {
    double total = 0.0;
    std::size_t tokens = 0;
    for (const auto& s : dev) {
        ScoredForward f = forward_scored(m, s.essay->tokens, s.target, bos);
        for (double lp : f.target_logprobs) total -= lp;
        tokens += s.target.size();
    }
    return total / static_cast<double>(tokens);
}

} // namespace

PretrainResult supervised_train(const Corpus& corpus, const Vocabulary& vocab,
                                const PretrainConfig& cfg, int exclude_fold) {
    cfg.validate();
    const std::vector<TraitId> order = trait_prediction_order(corpus.schema);
    const int bos = vocab.bos_id();

    std::vector<PreparedSample> pool;
    for (const EssayRecord& e : corpus.essays) {
        if (exclude_fold >= 0 && e.fold == exclude_fold) continue;
        const PromptSpec& prompt = corpus.schema.prompt(e.prompt_id);
        pool.push_back({&e, serialize_targets(e.gold, prompt, vocab, order)});
    }
    if (pool.empty()) throw std::invalid_argument("no essays to pretrain on");

    std::vector<PreparedSample> dev, train;
    if (pool.size() == 1) {
        // Degenerate memorization mode: the single sample serves both roles.
        dev = pool;
        train = pool;
    } else {
        std::mt19937_64 split_rng(derive_seed(cfg.seed, "pretrain/dev"));
        std::shuffle(pool.begin(), pool.end(), split_rng);
        std::size_t n_dev = std::max<std::size_t>(
            1, static_cast<std::size_t>(
                   std::lround(cfg.dev_fraction * static_cast<double>(pool.size()))));
        if (n_dev >= pool.size()) n_dev = pool.size() - 1;
        dev.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_dev));
        train.assign(pool.begin() + static_cast<std::ptrdiff_t>(n_dev), pool.end());
    }

    Model model = Model::init(cfg.model, derive_seed(cfg.seed, "pretrain/init"));
    AdamOptimizer opt(cfg.lr);
    opt.attach(model);

    PretrainResult result;
    result.dev_size = static_cast<int>(dev.size());
    result.train_size = static_cast<int>(train.size());

    Model best = model;
    double best_ce = dev_cross_entropy(model, dev, bos);
    result.curve.push_back(json{{"step", 0}, {"epoch", 0}, {"train_ce", nullptr},
                                {"dev_ce", best_ce}, {"improved", true}});

    int stall = 0;
    int step = 0;
    double run_loss = 0.0;
    int run_count = 0;
    bool stop = false;

    for (int epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
        std::vector<std::size_t> idx(train.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::mt19937_64 erng(derive_seed(cfg.seed, "pretrain/epoch/" + std::to_string(epoch)));
        std::shuffle(idx.begin(), idx.end(), erng);

        for (std::size_t b = 0; b < idx.size() && !stop; b += static_cast<std::size_t>(cfg.batch_size)) {
            std::size_t bend = std::min(idx.size(), b + static_cast<std::size_t>(cfg.batch_size));
            const double inv_b = 1.0 / static_cast<double>(bend - b);
            model.zero_grad();
            double batch_loss = 0.0;
            for (std::size_t k = b; k < bend; ++k) {
                const PreparedSample& s = train[idx[k]];
                ScoredForward f = forward_scored(model, s.essay->tokens, s.target, bos);
                CeLossResult ce = ce_loss(f.logits, s.target);
                batch_loss += ce.loss * inv_b;
                backward(model, f.ec, f.dc, ce.d_logits * inv_b, Mat());
            }
            if (!std::isfinite(batch_loss))
                throw std::runtime_error("non-finite pretraining loss at step " +
                                         std::to_string(step) + " (epoch " +
                                         std::to_string(epoch) + ", loss " +
                                         std::to_string(batch_loss) + ")");
            opt.step();
            ++step;
            run_loss += batch_loss;
            ++run_count;

            if (step % cfg.eval_interval == 0) {
                double dev_ce = dev_cross_entropy(model, dev, bos);
                bool improved = dev_ce < best_ce;
                if (improved) {
                    best_ce = dev_ce;
                    best = model;
                    stall = 0;
                } else {
                    ++stall;
                }
                result.curve.push_back(json{{"step", step},
                                            {"epoch", epoch},
                                            {"train_ce", run_loss / run_count},
                                            {"dev_ce", dev_ce},
                                            {"improved", improved}});
                run_loss = 0.0;
                run_count = 0;
                if (stall >= cfg.patience) stop = true;
            }
        }
    }

    // Final evaluation so short runs that never hit eval_interval still pick
    // the better of {init, end-of-training}.
    if (!stop) {
        double dev_ce = dev_cross_entropy(model, dev, bos);
        bool improved = dev_ce < best_ce;
        if (improved) {
            best_ce = dev_ce;
            best = model;
        }
        result.curve.push_back(json{{"step", step},
                                    {"epoch", cfg.epochs},
                                    {"train_ce", run_count ? json(run_loss / run_count) : json()},
                                    {"dev_ce", dev_ce},
                                    {"improved", improved}});
    }

    result.model = std::move(best);
    result.best_dev_ce = best_ce;
    result.steps_taken = step;
    return result;
}

Model clone_frozen(const Model& m) { return m; }

EvaluationReport evaluate_policy(const Model& m, const Schema& schema, const Vocabulary& vocab,
                                 const std::vector<const EssayRecord*>& essays) {
    const std::vector<TraitId> order = trait_prediction_order(schema);
    GenerateOptions opt;
    opt.mode = DecodeMode::Greedy;
    opt.max_len = m.cfg.max_dec_len;
    opt.bos = vocab.bos_id();
    opt.eos = vocab.eos_id();

    std::vector<EvalSample> samples;
    samples.reserve(essays.size());
    for (const EssayRecord* e : essays) {
        GenerationOutput g = generate(m, e->tokens, opt);
        const PromptSpec& prompt = schema.prompt(e->prompt_id);
        ParseResult parsed = parse_scores(g.tokens, prompt, vocab, order);
        samples.push_back(EvalSample{e->prompt_id, e->gold, parsed.scores, parsed.ok});
    }
    return evaluate_report(samples, schema);
}

void save_checkpoint(const std::string& path, const Model& m, const CheckpointMeta& meta) {
    json j;
    j["format"] = "aeslab-checkpoint-v1";
    j["schema_hash"] = hash_hex(meta.schema_hash);
    j["vocab_hash"] = hash_hex(meta.vocab_hash);
    j["model_config"] = m.cfg.to_json();
    j["hyperparams"] = meta.hyperparams;
    j["param_hash"] = hash_hex(m.param_hash());
    j["params"] = m.params_to_json();
    atomic_write_file(path, j.dump());
}

Model load_checkpoint(const std::string& path, std::uint64_t expect_schema_hash,
                      std::uint64_t expect_vocab_hash, CheckpointMeta* meta_out) {
    json j = json::parse(read_file(path));
    if (j.value("format", "") != "aeslab-checkpoint-v1")
        throw std::runtime_error("unrecognized checkpoint format in " + path);
    std::uint64_t schema_hash = std::stoull(j.at("schema_hash").get<std::string>(), nullptr, 16);
    std::uint64_t vocab_hash = std::stoull(j.at("vocab_hash").get<std::string>(), nullptr, 16);
    if (expect_schema_hash != 0 && schema_hash != expect_schema_hash)
        throw std::runtime_error("checkpoint schema hash mismatch: checkpoint " +
                                 hash_hex(schema_hash) + " vs expected " +
                                 hash_hex(expect_schema_hash));
    if (expect_vocab_hash != 0 && vocab_hash != expect_vocab_hash)
        throw std::runtime_error("checkpoint vocabulary hash mismatch: checkpoint " +
                                 hash_hex(vocab_hash) + " vs expected " +
                                 hash_hex(expect_vocab_hash));
    Model m = Model::init(ModelConfig::from_json(j.at("model_config")), 0);
    m.params_from_json(j.at("params"));
    std::uint64_t want = std::stoull(j.at("param_hash").get<std::string>(), nullptr, 16);
    if (m.param_hash() != want)
        throw std::runtime_error("checkpoint parameter hash mismatch after load: " + path);
    if (meta_out) {
        meta_out->schema_hash = schema_hash;
        meta_out->vocab_hash = vocab_hash;
        meta_out->hyperparams = j.value("hyperparams", json::object());
    }
    return m;
}

} // namespace aeslab
