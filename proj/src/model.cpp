#include "aeslab/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace aeslab {

void ModelConfig::validate() const {
    if (d_model < 2) throw std::invalid_argument("d_model must be >= 2");
    if (n_heads < 1 || d_model % n_heads != 0)
        throw std::invalid_argument("n_heads must divide d_model");
    if (n_enc_layers < 1 || n_dec_layers < 1)
        throw std::invalid_argument("need at least one layer per stack");
    if (d_ff < 1) throw std::invalid_argument("d_ff must be positive");
    if (max_enc_len < 1 || max_dec_len < 1) throw std::invalid_argument("max lengths");
    if (vocab_size < 2) throw std::invalid_argument("vocab_size must be set");
    if (n_value_channels < 1) throw std::invalid_argument("need a value channel");
}

json ModelConfig::to_json() const {
    return json{{"d_model", d_model},         {"n_heads", n_heads},
                {"n_enc_layers", n_enc_layers}, {"n_dec_layers", n_dec_layers},
                {"d_ff", d_ff},               {"max_enc_len", max_enc_len},
                {"max_dec_len", max_dec_len}, {"vocab_size", vocab_size},
                {"n_value_channels", n_value_channels}};
}

ModelConfig ModelConfig::from_json(const json& j) {
    ModelConfig c;
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.n_enc_layers = j.at("n_enc_layers").get<int>();
    c.n_dec_layers = j.at("n_dec_layers").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.max_enc_len = j.at("max_enc_len").get<int>();
    c.max_dec_len = j.at("max_dec_len").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.n_value_channels = j.at("n_value_channels").get<int>();
    c.validate();
    return c;
}

namespace {

Linear make_linear(int in, int out) {
    Linear l;
    l.w = Mat::Zero(in, out);
    l.b = Mat::Zero(out, 1);
    l.gw = Mat::Zero(in, out);
    l.gb = Mat::Zero(out, 1);
    return l;
}

LayerNormParams make_ln(int d) {
    LayerNormParams p;
    p.gain = Mat::Ones(d, 1);
    p.bias = Mat::Zero(d, 1);
    p.ggain = Mat::Zero(d, 1);
    p.gbias = Mat::Zero(d, 1);
    return p;
}

AttnParams make_attn(int d) {
    return AttnParams{make_linear(d, d), make_linear(d, d), make_linear(d, d),
                      make_linear(d, d)};
}

constexpr double kLnEps = 1e-5;
constexpr double kGeluC0 = 0.7978845608028654; // sqrt(2/pi)
constexpr double kGeluC1 = 0.044715;

double gelu_scalar(double x) {
    double u = kGeluC0 * (x + kGeluC1 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_prime_scalar(double x) {
    double u = kGeluC0 * (x + kGeluC1 * x * x * x);
    double t = std::tanh(u);
    double du = kGeluC0 * (1.0 + 3.0 * kGeluC1 * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

Mat linear_fwd(const Linear& l, const Mat& x) {
    Mat y = x * l.w;
    y.rowwise() += l.b.col(0).transpose();
    return y;
}

// Returns dx; accumulates parameter gradients.
Mat linear_bwd(Linear& l, const Mat& x, const Mat& dy) {
    l.gw.noalias() += x.transpose() * dy;
    l.gb.col(0).noalias() += dy.colwise().sum().transpose();
    return dy * l.w.transpose();
}

Mat ln_fwd(const LayerNormParams& p, const Mat& x, LnCache* cache) {
    const auto d = x.cols();
    Mat xhat(x.rows(), d);
    Eigen::VectorXd inv_sd(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        double mu = x.row(r).mean();
        double var = (x.row(r).array() - mu).square().sum() / static_cast<double>(d);
        double isd = 1.0 / std::sqrt(var + kLnEps);
        xhat.row(r) = (x.row(r).array() - mu) * isd;
        inv_sd(r) = isd;
    }
    Mat y = xhat.array().rowwise() * p.gain.col(0).transpose().array();
    y.rowwise() += p.bias.col(0).transpose();
    if (cache) {
        cache->xhat = xhat;
        cache->inv_sd = inv_sd;
    }
    return y;
}

Mat ln_bwd(LayerNormParams& p, const LnCache& cache, const Mat& dy) {
    const auto d = dy.cols();
    p.ggain.col(0).noalias() += (dy.array() * cache.xhat.array()).colwise().sum().transpose().matrix();
    p.gbias.col(0).noalias() += dy.colwise().sum().transpose();
    Mat dxhat = dy.array().rowwise() * p.gain.col(0).transpose().array();
    Mat dx(dy.rows(), d);
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
        double m1 = dxhat.row(r).mean();
        double m2 = (dxhat.row(r).array() * cache.xhat.row(r).array()).mean();
        dx.row(r) =
            cache.inv_sd(r) * (dxhat.row(r).array() - m1 - cache.xhat.row(r).array() * m2);
    }
    return dx;
}

// Multi-head attention forward. x_q is the (already layer-normed) query-side
// input, x_kv the key/value-side input. Causal masking keeps position i from
// attending beyond i.
Mat attn_fwd(const AttnParams& p, int n_heads, const Mat& x_q, const Mat& x_kv, bool causal,
             AttnCache* cache) {
    const auto d = x_q.cols();
    const auto dk = d / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    Mat q = linear_fwd(p.wq, x_q);
    Mat k = linear_fwd(p.wk, x_kv);
    Mat v = linear_fwd(p.wv, x_kv);
    Mat concat(x_q.rows(), d);
    std::vector<Mat> attn(static_cast<std::size_t>(n_heads));
    for (int h = 0; h < n_heads; ++h) {
        Mat scores = q.middleCols(h * dk, dk) * k.middleCols(h * dk, dk).transpose() * scale;
        if (causal)
            for (Eigen::Index i = 0; i < scores.rows(); ++i)
                for (Eigen::Index j = i + 1; j < scores.cols(); ++j) scores(i, j) = -1e30;
        for (Eigen::Index i = 0; i < scores.rows(); ++i) {
            double m = scores.row(i).maxCoeff();
            Eigen::ArrayXd e = (scores.row(i).array() - m).exp();
            scores.row(i) = e / e.sum();
        }
        attn[static_cast<std::size_t>(h)] = scores;
        concat.middleCols(h * dk, dk).noalias() = scores * v.middleCols(h * dk, dk);
    }
    Mat out = linear_fwd(p.wo, concat);
    if (cache) {
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->attn = std::move(attn);
        cache->concat = std::move(concat);
        cache->ln_out = x_q;
    }
    return out;
}

// Returns (dx_q, dx_kv).
std::pair<Mat, Mat> attn_bwd(AttnParams& p, int n_heads, const AttnCache& cache, const Mat& x_kv,
                             const Mat& d_out) {
    const auto d = cache.q.cols();
    const auto dk = d / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    Mat d_concat = linear_bwd(p.wo, cache.concat, d_out);
    Mat dq = Mat::Zero(cache.q.rows(), d);
    Mat dkm = Mat::Zero(cache.k.rows(), d);
    Mat dvm = Mat::Zero(cache.v.rows(), d);
    for (int h = 0; h < n_heads; ++h) {
        const Mat& a = cache.attn[static_cast<std::size_t>(h)];
        Mat d_oh = d_concat.middleCols(h * dk, dk);
        Mat da = d_oh * cache.v.middleCols(h * dk, dk).transpose();
        dvm.middleCols(h * dk, dk).noalias() += a.transpose() * d_oh;
        // softmax backward, row-wise
        Mat ds(a.rows(), a.cols());
        for (Eigen::Index i = 0; i < a.rows(); ++i) {
            double dot = (da.row(i).array() * a.row(i).array()).sum();
            ds.row(i) = a.row(i).array() * (da.row(i).array() - dot);
        }
        dq.middleCols(h * dk, dk).noalias() += ds * cache.k.middleCols(h * dk, dk) * scale;
        dkm.middleCols(h * dk, dk).noalias() +=
            ds.transpose() * cache.q.middleCols(h * dk, dk) * scale;
    }
    Mat dx_q = linear_bwd(p.wq, cache.ln_out, dq);
    Mat dx_kv = linear_bwd(p.wk, x_kv, dkm);
    dx_kv.noalias() += linear_bwd(p.wv, x_kv, dvm);
    return {std::move(dx_q), std::move(dx_kv)};
}

Mat ffn_fwd(const Linear& ff1, const Linear& ff2, const Mat& x, FfnCache* cache) {
    Mat z1 = linear_fwd(ff1, x);
    Mat a1 = z1.unaryExpr([](double v) { return gelu_scalar(v); });
    Mat out = linear_fwd(ff2, a1);
    if (cache) {
        cache->ln_out = x;
        cache->z1 = std::move(z1);
        cache->a1 = std::move(a1);
    }
    return out;
}

Mat ffn_bwd(Linear& ff1, Linear& ff2, const FfnCache& cache, const Mat& d_out) {
    Mat da1 = linear_bwd(ff2, cache.a1, d_out);
    Mat dz1 =
        da1.array() * cache.z1.unaryExpr([](double v) { return gelu_prime_scalar(v); }).array();
    return linear_bwd(ff1, cache.ln_out, dz1);
}

} // namespace

Model Model::init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    const int d = cfg.d_model;
    m.tok_emb = Mat::Zero(cfg.vocab_size, d);
    m.g_tok_emb = m.tok_emb;
    m.pos_enc = Mat::Zero(cfg.max_enc_len, d);
    m.g_pos_enc = m.pos_enc;
    m.pos_dec = Mat::Zero(cfg.max_dec_len, d);
    m.g_pos_dec = m.pos_dec;
    for (int i = 0; i < cfg.n_enc_layers; ++i)
        m.enc.push_back(EncLayer{make_ln(d), make_attn(d), make_ln(d), make_linear(d, cfg.d_ff),
                                 make_linear(cfg.d_ff, d)});
    for (int i = 0; i < cfg.n_dec_layers; ++i)
        m.dec.push_back(DecLayer{make_ln(d), make_attn(d), make_ln(d), make_attn(d), make_ln(d),
                                 make_linear(d, cfg.d_ff), make_linear(cfg.d_ff, d)});
    m.enc_final = make_ln(d);
    m.dec_final = make_ln(d);
    m.out_proj = make_linear(d, cfg.vocab_size);
    m.value_head = make_linear(d, cfg.n_value_channels);

    // Fill weights: symmetric uniform with scale 1/sqrt(fan_in), where
    // fan_in is the tensor's leading dimension. Gains stay 1, biases 0.
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    m.for_each_param([&](const std::string& name, Mat& value, Mat&) {
        bool is_bias = name.size() >= 2 && name.substr(name.size() - 2) == ".b";
        if (name.find("gain") != std::string::npos || name.find("bias") != std::string::npos ||
            is_bias)
            return;
        double s = 1.0 / std::sqrt(static_cast<double>(value.rows()));
        for (Eigen::Index c = 0; c < value.cols(); ++c)
            for (Eigen::Index r = 0; r < value.rows(); ++r) value(r, c) = u(rng) * s;
    });
    return m;
}

namespace {

template <typename ModelT, typename Fn>
void visit_params(ModelT& m, Fn&& fn) {
    fn("tok_emb", m.tok_emb, m.g_tok_emb);
    fn("pos_enc", m.pos_enc, m.g_pos_enc);
    fn("pos_dec", m.pos_dec, m.g_pos_dec);
    auto visit_linear = [&](const std::string& p, auto& l) {
        fn(p + ".w", l.w, l.gw);
        fn(p + ".b", l.b, l.gb);
    };
    auto visit_ln = [&](const std::string& p, auto& ln) {
        fn(p + ".gain", ln.gain, ln.ggain);
        fn(p + ".bias", ln.bias, ln.gbias);
    };
    auto visit_attn = [&](const std::string& p, auto& a) {
        visit_linear(p + ".wq", a.wq);
        visit_linear(p + ".wk", a.wk);
        visit_linear(p + ".wv", a.wv);
        visit_linear(p + ".wo", a.wo);
    };
    for (std::size_t i = 0; i < m.enc.size(); ++i) {
        std::string p = "enc" + std::to_string(i);
        visit_ln(p + ".ln1", m.enc[i].ln1);
        visit_attn(p + ".attn", m.enc[i].attn);
        visit_ln(p + ".ln2", m.enc[i].ln2);
        visit_linear(p + ".ff1", m.enc[i].ff1);
        visit_linear(p + ".ff2", m.enc[i].ff2);
    }
    for (std::size_t i = 0; i < m.dec.size(); ++i) {
        std::string p = "dec" + std::to_string(i);
        visit_ln(p + ".ln1", m.dec[i].ln1);
        visit_attn(p + ".self", m.dec[i].self_attn);
        visit_ln(p + ".ln2", m.dec[i].ln2);
        visit_attn(p + ".cross", m.dec[i].cross_attn);
        visit_ln(p + ".ln3", m.dec[i].ln3);
        visit_linear(p + ".ff1", m.dec[i].ff1);
        visit_linear(p + ".ff2", m.dec[i].ff2);
    }
    visit_ln("enc_final", m.enc_final);
    visit_ln("dec_final", m.dec_final);
    visit_linear("out_proj", m.out_proj);
    visit_linear("value_head", m.value_head);
}

} // namespace

void Model::for_each_param(const std::function<void(const std::string&, Mat&, Mat&)>& fn) {
    visit_params(*this, fn);
}

void Model::for_each_param_const(
    const std::function<void(const std::string&, const Mat&, const Mat&)>& fn) const {
    visit_params(*this, fn);
}

void Model::zero_grad() {
    for_each_param([](const std::string&, Mat&, Mat& g) { g.setZero(); });
}

std::size_t Model::parameter_count() const {
    std::size_t n = 0;
    for_each_param_const([&](const std::string&, const Mat& v, const Mat&) {
        n += static_cast<std::size_t>(v.size());
    });
    return n;
}

std::uint64_t Model::param_hash() const {
    std::string bytes;
    for_each_param_const([&](const std::string&, const Mat& v, const Mat&) {
        bytes.append(reinterpret_cast<const char*>(v.data()),
                     static_cast<std::size_t>(v.size()) * sizeof(double));
    });
    return fnv1a64(bytes);
}

json Model::params_to_json() const {
    json out = json::object();
    for_each_param_const([&](const std::string& name, const Mat& v, const Mat&) {
        json rows = json::array();
        for (Eigen::Index r = 0; r < v.rows(); ++r) {
            json row = json::array();
            for (Eigen::Index c = 0; c < v.cols(); ++c) row.push_back(v(r, c));
            rows.push_back(std::move(row));
        }
        out[name] = std::move(rows);
    });
    return out;
}

void Model::params_from_json(const json& j) {
    for_each_param([&](const std::string& name, Mat& v, Mat&) {
        const json& rows = j.at(name);
        if (static_cast<Eigen::Index>(rows.size()) != v.rows())
            throw std::runtime_error("parameter row mismatch for " + name);
        for (Eigen::Index r = 0; r < v.rows(); ++r) {
            const json& row = rows.at(static_cast<std::size_t>(r));
            if (static_cast<Eigen::Index>(row.size()) != v.cols())
                throw std::runtime_error("parameter column mismatch for " + name);
            for (Eigen::Index c = 0; c < v.cols(); ++c)
                v(r, c) = row.at(static_cast<std::size_t>(c)).get<double>();
        }
    });
}

namespace {

Mat embed(const Model& m, const std::vector<int>& tokens, const Mat& pos, int max_len,
          const char* which) {
    if (static_cast<int>(tokens.size()) > max_len)
        throw std::invalid_argument(std::string(which) + " sequence exceeds configured maximum");
    Mat x(static_cast<Eigen::Index>(tokens.size()), m.cfg.d_model);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        int id = tokens[t];
        if (id < 0 || id >= m.cfg.vocab_size) throw std::invalid_argument("token id out of range");
        x.row(static_cast<Eigen::Index>(t)) =
            m.tok_emb.row(id) + pos.row(static_cast<Eigen::Index>(t));
    }
    return x;
}

} // namespace

Mat encode(const Model& m, const std::vector<int>& tokens, EncoderCache* cache) {
    if (tokens.empty()) throw std::invalid_argument("empty encoder input");
    Mat x = embed(m, tokens, m.pos_enc, m.cfg.max_enc_len, "encoder");
    if (cache) {
        cache->tokens = tokens;
        cache->embedded = x;
        cache->layers.assign(static_cast<std::size_t>(m.cfg.n_enc_layers), EncLayerCache{});
    }
    for (std::size_t li = 0; li < m.enc.size(); ++li) {
        const EncLayer& L = m.enc[li];
        EncLayerCache* lc = cache ? &cache->layers[li] : nullptr;
        if (lc) lc->x_in = x;
        Mat ln1 = ln_fwd(L.ln1, x, lc ? &lc->ln1 : nullptr);
        x += attn_fwd(L.attn, m.cfg.n_heads, ln1, ln1, false, lc ? &lc->attn : nullptr);
        Mat ln2 = ln_fwd(L.ln2, x, lc ? &lc->ln2 : nullptr);
        x += ffn_fwd(L.ff1, L.ff2, ln2, lc ? &lc->ffn : nullptr);
    }
    Mat out = ln_fwd(m.enc_final, x, cache ? &cache->final_ln : nullptr);
    if (cache) cache->out = out;
    return out;
}

Mat decode(const Model& m, const Mat& enc_out, const std::vector<int>& dec_input,
           DecoderCache* cache) {
    if (dec_input.empty()) throw std::invalid_argument("empty decoder input");
    Mat x = embed(m, dec_input, m.pos_dec, m.cfg.max_dec_len, "decoder");
    if (cache) {
        cache->tokens = dec_input;
        cache->embedded = x;
        cache->layers.assign(static_cast<std::size_t>(m.cfg.n_dec_layers), DecLayerCache{});
    }
    for (std::size_t li = 0; li < m.dec.size(); ++li) {
        const DecLayer& L = m.dec[li];
        DecLayerCache* lc = cache ? &cache->layers[li] : nullptr;
        if (lc) lc->x_in = x;
        Mat ln1 = ln_fwd(L.ln1, x, lc ? &lc->ln1 : nullptr);
        x += attn_fwd(L.self_attn, m.cfg.n_heads, ln1, ln1, true, lc ? &lc->self_attn : nullptr);
        Mat ln2 = ln_fwd(L.ln2, x, lc ? &lc->ln2 : nullptr);
        x += attn_fwd(L.cross_attn, m.cfg.n_heads, ln2, enc_out, false,
                      lc ? &lc->cross_attn : nullptr);
        Mat ln3 = ln_fwd(L.ln3, x, lc ? &lc->ln3 : nullptr);
        x += ffn_fwd(L.ff1, L.ff2, ln3, lc ? &lc->ffn : nullptr);
    }
    Mat hidden = ln_fwd(m.dec_final, x, cache ? &cache->final_ln : nullptr);
    if (cache) cache->hidden = hidden;
    return hidden;
}

Mat project_logits(const Model& m, const Mat& hidden) { return linear_fwd(m.out_proj, hidden); }

Mat project_values(const Model& m, const Mat& hidden) { return linear_fwd(m.value_head, hidden); }

void backward(Model& m, const EncoderCache& ec, const DecoderCache& dc, const Mat& d_logits,
              const Mat& d_values) {
    Mat d_hidden = linear_bwd(m.out_proj, dc.hidden, d_logits);
    if (d_values.size() > 0) d_hidden.noalias() += linear_bwd(m.value_head, dc.hidden, d_values);

    Mat dx = ln_bwd(m.dec_final, dc.final_ln, d_hidden);
    Mat d_enc_out = Mat::Zero(ec.out.rows(), ec.out.cols());
    for (std::size_t li = m.dec.size(); li-- > 0;) {
        DecLayer& L = m.dec[li];
        const DecLayerCache& lc = dc.layers[li];
        Mat d_ln3 = ffn_bwd(L.ff1, L.ff2, lc.ffn, dx);
        dx += ln_bwd(L.ln3, lc.ln3, d_ln3);
        auto [d_ln2, d_enc_contrib] =
            attn_bwd(L.cross_attn, m.cfg.n_heads, lc.cross_attn, ec.out, dx);
        d_enc_out += d_enc_contrib;
        dx += ln_bwd(L.ln2, lc.ln2, d_ln2);
        auto [d_ln1_q, d_ln1_kv] =
            attn_bwd(L.self_attn, m.cfg.n_heads, lc.self_attn, lc.self_attn.ln_out, dx);
        dx += ln_bwd(L.ln1, lc.ln1, d_ln1_q + d_ln1_kv);
    }
    for (std::size_t t = 0; t < dc.tokens.size(); ++t) {
        m.g_tok_emb.row(dc.tokens[t]) += dx.row(static_cast<Eigen::Index>(t));
        m.g_pos_dec.row(static_cast<Eigen::Index>(t)) += dx.row(static_cast<Eigen::Index>(t));
    }

    Mat dxe = ln_bwd(m.enc_final, ec.final_ln, d_enc_out);
    for (std::size_t li = m.enc.size(); li-- > 0;) {
        EncLayer& L = m.enc[li];
        const EncLayerCache& lc = ec.layers[li];
        Mat d_ln2 = ffn_bwd(L.ff1, L.ff2, lc.ffn, dxe);
        dxe += ln_bwd(L.ln2, lc.ln2, d_ln2);
        auto [d_ln1_q, d_ln1_kv] = attn_bwd(L.attn, m.cfg.n_heads, lc.attn, lc.attn.ln_out, dxe);
        dxe += ln_bwd(L.ln1, lc.ln1, d_ln1_q + d_ln1_kv);
    }
    for (std::size_t t = 0; t < ec.tokens.size(); ++t) {
        m.g_tok_emb.row(ec.tokens[t]) += dxe.row(static_cast<Eigen::Index>(t));
        m.g_pos_enc.row(static_cast<Eigen::Index>(t)) += dxe.row(static_cast<Eigen::Index>(t));
    }
}

DecodeState start_decode(const Model& m, const Mat& enc_out) {
    DecodeState st;
    st.enc_out = enc_out;
    st.self_k.resize(m.dec.size());
    st.self_v.resize(m.dec.size());
    st.cross_k.resize(m.dec.size());
    st.cross_v.resize(m.dec.size());
    for (std::size_t li = 0; li < m.dec.size(); ++li) {
        st.self_k[li] = Mat(0, m.cfg.d_model);
        st.self_v[li] = Mat(0, m.cfg.d_model);
        st.cross_k[li] = linear_fwd(m.dec[li].cross_attn.wk, enc_out);
        st.cross_v[li] = linear_fwd(m.dec[li].cross_attn.wv, enc_out);
    }
    return st;
}

namespace {

// Single-query attention against precomputed key/value rows.
Mat attend_row(const Mat& q, const Mat& k, const Mat& v, int n_heads) {
    const auto d = q.cols();
    const auto dk = d / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    Mat concat(1, d);
    for (int h = 0; h < n_heads; ++h) {
        Eigen::RowVectorXd scores =
            q.middleCols(h * dk, dk) * k.middleCols(h * dk, dk).transpose() * scale;
        double mx = scores.maxCoeff();
        Eigen::ArrayXd e = (scores.transpose().array() - mx).exp();
        Eigen::VectorXd a = e / e.sum();
        concat.middleCols(h * dk, dk).noalias() = a.transpose() * v.middleCols(h * dk, dk);
    }
    return concat;
}

} // namespace

Mat decode_step(const Model& m, DecodeState& st, int token) {
    if (st.step >= m.cfg.max_dec_len)
        throw std::invalid_argument("decoder ran past its configured maximum length");
    if (token < 0 || token >= m.cfg.vocab_size)
        throw std::invalid_argument("token id out of range");
    Mat x = m.tok_emb.row(token) + m.pos_dec.row(st.step);
    for (std::size_t li = 0; li < m.dec.size(); ++li) {
        const DecLayer& L = m.dec[li];
        Mat ln1 = ln_fwd(L.ln1, x, nullptr);
        Mat k_new = linear_fwd(L.self_attn.wk, ln1);
        Mat v_new = linear_fwd(L.self_attn.wv, ln1);
        st.self_k[li].conservativeResize(st.self_k[li].rows() + 1, Eigen::NoChange);
        st.self_k[li].row(st.self_k[li].rows() - 1) = k_new.row(0);
        st.self_v[li].conservativeResize(st.self_v[li].rows() + 1, Eigen::NoChange);
        st.self_v[li].row(st.self_v[li].rows() - 1) = v_new.row(0);
        Mat q = linear_fwd(L.self_attn.wq, ln1);
        Mat sa = attend_row(q, st.self_k[li], st.self_v[li], m.cfg.n_heads);
        x += linear_fwd(L.self_attn.wo, sa);

        Mat ln2 = ln_fwd(L.ln2, x, nullptr);
        Mat qc = linear_fwd(L.cross_attn.wq, ln2);
        Mat ca = attend_row(qc, st.cross_k[li], st.cross_v[li], m.cfg.n_heads);
        x += linear_fwd(L.cross_attn.wo, ca);

        Mat ln3 = ln_fwd(L.ln3, x, nullptr);
        x += ffn_fwd(L.ff1, L.ff2, ln3, nullptr);
    }
    ++st.step;
    return ln_fwd(m.dec_final, x, nullptr);
}

} // namespace aeslab
