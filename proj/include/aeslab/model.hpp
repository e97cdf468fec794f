#pragma once
// A small attention-based encoder-decoder over token ids, written directly
// against Eigen in 64-bit floats: pre-norm residual blocks, learned
// positional embeddings, a shared input embedding, a vocabulary projection,
// and a two-output value head on the decoder states. Forward passes fill
// caches that the hand-rolled backward pass consumes; gradients accumulate
// into the parameter struct until zero_grad().

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "aeslab/util.hpp"

namespace aeslab {

using Mat = Eigen::MatrixXd;

struct ModelConfig {
    int d_model = 64;
    int n_heads = 4;
    int n_enc_layers = 2;
    int n_dec_layers = 2;
    int d_ff = 128;
    int max_enc_len = 96;
    int max_dec_len = 32;
    int vocab_size = 0; // filled from the vocabulary
    int n_value_channels = 2;

    void validate() const;
    json to_json() const;
    static ModelConfig from_json(const json& j);
};

struct Linear {
    Mat w;  // in x out
    Mat b;  // out x 1
    Mat gw, gb;
};

struct LayerNormParams {
    Mat gain; // d x 1
    Mat bias; // d x 1
    Mat ggain, gbias;
};

struct AttnParams {
    Linear wq, wk, wv, wo;
};

struct EncLayer {
    LayerNormParams ln1;
    AttnParams attn;
    LayerNormParams ln2;
    Linear ff1, ff2;
};

struct DecLayer {
    LayerNormParams ln1;
    AttnParams self_attn;
    LayerNormParams ln2;
    AttnParams cross_attn;
    LayerNormParams ln3;
    Linear ff1, ff2;
};

// ---- forward caches ----------------------------------------------------

struct LnCache {
    Mat xhat;                // rows normalized
    Eigen::VectorXd inv_sd;  // per row
};

struct AttnCache {
    Mat q, k, v;             // T x d blocks (all heads concatenated)
    std::vector<Mat> attn;   // per head, Tq x Tk softmax rows
    Mat concat;              // Tq x d, input of wo
    Mat ln_out;              // the block input after layer norm (q side)
};

struct FfnCache {
    Mat ln_out; // input
    Mat z1;     // pre-activation
    Mat a1;     // post-activation
};

struct EncLayerCache {
    LnCache ln1, ln2;
    AttnCache attn;
    FfnCache ffn;
    Mat x_in; // residual stream entering the layer
};

struct DecLayerCache {
    LnCache ln1, ln2, ln3;
    AttnCache self_attn, cross_attn;
    FfnCache ffn;
    Mat x_in;
};

struct EncoderCache {
    std::vector<int> tokens;
    Mat embedded;
    std::vector<EncLayerCache> layers;
    LnCache final_ln;
    Mat out; // T_e x d
};

struct DecoderCache {
    std::vector<int> tokens; // decoder input ids (bos + shifted targets)
    Mat embedded;
    std::vector<DecLayerCache> layers;
    LnCache final_ln;
    Mat hidden; // T_d x d, feeds logits and values
};

// ---- the model -----------------------------------------------------------

struct Model {
    ModelConfig cfg;
    Mat tok_emb, g_tok_emb; // vocab x d
    Mat pos_enc, g_pos_enc; // max_enc_len x d
    Mat pos_dec, g_pos_dec; // max_dec_len x d
    std::vector<EncLayer> enc;
    std::vector<DecLayer> dec;
    LayerNormParams enc_final, dec_final;
    Linear out_proj;   // d x vocab
    Linear value_head; // d x channels

    // Symmetric uniform init scaled by fan-in, fully seed-determined.
    static Model init(const ModelConfig& cfg, std::uint64_t seed);

    // Visits every parameter tensor with its gradient, in a fixed order.
    void for_each_param(const std::function<void(const std::string&, Mat&, Mat&)>& fn);
    void for_each_param_const(
        const std::function<void(const std::string&, const Mat&, const Mat&)>& fn) const;
    void zero_grad();
    std::size_t parameter_count() const;
    std::uint64_t param_hash() const;

    json params_to_json() const;
    void params_from_json(const json& j);
};

// Full encoder pass; cache may be null when no backward will follow.
Mat encode(const Model& m, const std::vector<int>& tokens, EncoderCache* cache);

// Teacher-forced decoder pass over `dec_input` attending to `enc_out`.
// Returns hidden states (T x d); logits/values are separate projections so
// callers can skip what they don't need.
Mat decode(const Model& m, const Mat& enc_out, const std::vector<int>& dec_input,
           DecoderCache* cache);

Mat project_logits(const Model& m, const Mat& hidden); // T x vocab
Mat project_values(const Model& m, const Mat& hidden); // T x channels

// Backward through the whole network given output-side gradients.
// d_hidden collects logits- and value-path gradients w.r.t. the decoder
// hidden states; the encoder side receives the cross-attention gradients.
// All parameter gradients ACCUMULATE (+=).
void backward(Model& m, const EncoderCache& ec, const DecoderCache& dc, const Mat& d_logits,
              const Mat& d_values);

// Incremental decoding state: per-layer self-attention key/value history
// plus the fixed cross-attention projections of the encoder output.
struct DecodeState {
    Mat enc_out;
    std::vector<Mat> self_k, self_v;   // grow one row per step
    std::vector<Mat> cross_k, cross_v; // fixed
    int step = 0;
};

DecodeState start_decode(const Model& m, const Mat& enc_out);

// Runs one decoder step for `token` at position state.step; returns the
// hidden row (1 x d). Advances the state.
Mat decode_step(const Model& m, DecodeState& state, int token);

} // namespace aeslab
