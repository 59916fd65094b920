#include "dfkt/conditioning.hpp"

#include <cctype>
#include <cmath>
#include <string>

#include "dfkt/errors.hpp"
#include "dfkt/nn.hpp"

namespace dfkt {

void ControlMeta::validate() const {
    if (orig_h <= 0 || orig_w <= 0) {
        throw ParameterError("ControlMeta: original size must be positive");
    }
    if (crop_top < 0 || crop_left < 0 || crop_top >= orig_h || crop_left >= orig_w) {
        throw ParameterError("ControlMeta: crop offsets outside the original image");
    }
    if (!(crop_scale > 0.0 && crop_scale <= 1.0)) {
        throw ParameterError("ControlMeta: crop_scale must lie in (0, 1]");
    }
}

template <typename T>
void sincos_embed_into(double value, int dim, T* out) {
    if (dim <= 0 || dim % 2 != 0) {
        throw ParameterError("sincos_embed: dim must be a positive even integer");
    }
    const int half = dim / 2;
    for (int k = 0; k < half; ++k) {
        const double omega = std::pow(10000.0, -2.0 * k / dim);
        out[2 * k] = static_cast<T>(std::sin(value * omega));
        out[2 * k + 1] = static_cast<T>(std::cos(value * omega));
    }
}

std::vector<double> sincos_embed(double value, int dim) {
    if (dim <= 0 || dim % 2 != 0) {
        throw ParameterError("sincos_embed: dim must be a positive even integer");
    }
    std::vector<double> out(static_cast<size_t>(dim));
    sincos_embed_into(value, dim, out.data());
    return out;
}

std::vector<TensorSpec> ControlEmbedder::layout() const {
    const int in_h = high_inputs * embed_dim;
    const int in_l = low_inputs * embed_dim;
    return {
        {"ctl_h.w1", {in_h, width}}, {"ctl_h.b1", {width}},
        {"ctl_h.w2", {width, width}}, {"ctl_h.b2", {width}},
        {"ctl_l.w1", {in_l, width}}, {"ctl_l.b1", {width}},
        {"ctl_l.w2", {width, width}}, {"ctl_l.b2", {width}},
    };
}

template <typename T>
MatrixT<T> embed_control(const std::vector<ControlMeta>& metas, const std::vector<double>& t_norm,
                         const ParamSet<T>& params, const ControlEmbedder& embedder,
                         const ControlWeightProfile& profile, ControlEmbedCache<T>* cache) {
    if (metas.size() != t_norm.size()) {
        throw ShapeError("embed_control: one t_norm per meta required");
    }
    const auto n = static_cast<Eigen::Index>(metas.size());
    const int de = embedder.embed_dim;
    ControlEmbedCache<T> local;
    ControlEmbedCache<T>& c = cache != nullptr ? *cache : local;

    c.feat_h.resize(n, ControlEmbedder::high_inputs * de);
    c.feat_l.resize(n, ControlEmbedder::low_inputs * de);
    c.gamma.resize(metas.size());
    for (Eigen::Index i = 0; i < n; ++i) {
        const ControlMeta& m = metas[static_cast<size_t>(i)];
        const double flip = embedder.use_flip && m.flip ? 1.0 : 0.0;
        T* fh = c.feat_h.row(i).data();
        sincos_embed_into(static_cast<double>(m.crop_top), de, fh);
        sincos_embed_into(static_cast<double>(m.crop_left), de, fh + de);
        sincos_embed_into(flip, de, fh + 2 * de);
        T* fl = c.feat_l.row(i).data();
        sincos_embed_into(static_cast<double>(m.orig_h), de, fl);
        sincos_embed_into(static_cast<double>(m.orig_w), de, fl + de);
        c.gamma[static_cast<size_t>(i)] =
            static_cast<T>(control_weight(t_norm[static_cast<size_t>(i)], profile));
    }

    MatrixT<T> out;
    nn::linear(c.feat_h, params["ctl_h.w1"], params["ctl_h.b1"], c.pre_h);
    c.act_h = nn::silu(c.pre_h);
    nn::linear(c.act_h, params["ctl_h.w2"], params["ctl_h.b2"], out);

    nn::linear(c.feat_l, params["ctl_l.w1"], params["ctl_l.b1"], c.pre_l);
    c.act_l = nn::silu(c.pre_l);
    nn::linear(c.act_l, params["ctl_l.w2"], params["ctl_l.b2"], c.out_l);

    for (Eigen::Index i = 0; i < n; ++i) {
        const T g = c.gamma[static_cast<size_t>(i)];
        if (g != T(0)) out.row(i) += g * c.out_l.row(i);
    }
    return out;
}

template <typename T>
void embed_control_backward(const ControlEmbedCache<T>& c, const MatrixT<T>& d_out,
                            const ParamSet<T>& params, ParamSet<T>& grads) {
    MatrixT<T> d_act;
    nn::linear_backward(c.act_h, params["ctl_h.w2"], d_out, &d_act, grads["ctl_h.w2"],
                        grads["ctl_h.b2"]);
    MatrixT<T> d_pre = nn::silu_backward(c.pre_h, d_act);
    nn::linear_backward<T>(c.feat_h, params["ctl_h.w1"], d_pre, nullptr, grads["ctl_h.w1"],
                           grads["ctl_h.b1"]);

    MatrixT<T> d_low = d_out;
    for (Eigen::Index i = 0; i < d_low.rows(); ++i) d_low.row(i) *= c.gamma[static_cast<size_t>(i)];
    nn::linear_backward(c.act_l, params["ctl_l.w2"], d_low, &d_act, grads["ctl_l.w2"],
                        grads["ctl_l.b2"]);
    d_pre = nn::silu_backward(c.pre_l, d_act);
    nn::linear_backward<T>(c.feat_l, params["ctl_l.w1"], d_pre, nullptr, grads["ctl_l.w1"],
                           grads["ctl_l.b1"]);
}

namespace {

void check_pad_args(Eigen::Index num_tokens, int total, double beta_txt) {
    if (num_tokens == 0) throw ParameterError("replicate_pad: empty token sequence");
    if (num_tokens > total) throw ParameterError("replicate_pad: more tokens than slots");
    if (!(beta_txt >= 0.0)) throw ParameterError("replicate_pad: beta_txt must be nonnegative");
}

int replication_count(Eigen::Index num_tokens, int total) {
    return static_cast<int>((total + num_tokens - 1) / num_tokens);
}

template <typename T>
RowVectorT<T> channel_std(const MatrixT<T>& tokens) {
    const RowVectorT<T> mean = tokens.colwise().mean();
    return ((tokens.rowwise() - mean).array().square().colwise().sum() / T(tokens.rows()))
        .sqrt()
        .matrix();
}

} // namespace

template <typename T>
MatrixT<T> replicate_pad(const MatrixT<T>& tokens, int total, double beta_txt, const MatrixT<T>& z) {
    const Eigen::Index len = tokens.rows();
    check_pad_args(len, total, beta_txt);
    const Eigen::Index pad = total - len;
    MatrixT<T> out(total, tokens.cols());
    out.topRows(len) = tokens;
    if (pad == 0) return out;

    for (Eigen::Index j = 0; j < pad; ++j) out.row(len + j) = tokens.row(j % len);
    if (beta_txt == 0.0) return out;
    if (z.rows() != pad || z.cols() != tokens.cols()) {
        throw ShapeError("replicate_pad: noise draws must be (total - L) x D");
    }
    const int m = replication_count(len, total);
    const T amp = static_cast<T>(beta_txt * std::sqrt(static_cast<double>(m - 1)));
    const RowVectorT<T> sd = channel_std(tokens);
    for (Eigen::Index j = 0; j < pad; ++j) {
        out.row(len + j).array() += amp * sd.array() * z.row(j).array();
    }
    return out;
}

template <typename T>
MatrixT<T> replicate_pad_backward(const MatrixT<T>& tokens, int total, double beta_txt,
                                  const MatrixT<T>& z, const MatrixT<T>& d_out) {
    const Eigen::Index len = tokens.rows();
    check_pad_args(len, total, beta_txt);
    const Eigen::Index pad = total - len;
    MatrixT<T> d_tok = d_out.topRows(len);
    for (Eigen::Index j = 0; j < pad; ++j) d_tok.row(j % len) += d_out.row(len + j);
    if (pad == 0 || beta_txt == 0.0) return d_tok;

    const int m = replication_count(len, total);
    const T amp = static_cast<T>(beta_txt * std::sqrt(static_cast<double>(m - 1)));
    const RowVectorT<T> mean = tokens.colwise().mean();
    const RowVectorT<T> sd = channel_std(tokens);
    // d loss / d sigma_c, then d sigma_c / d x_ic = (x_ic - mean_c) / (L sigma_c).
    RowVectorT<T> d_sd = RowVectorT<T>::Zero(tokens.cols());
    for (Eigen::Index j = 0; j < pad; ++j) {
        d_sd.array() += amp * z.row(j).array() * d_out.row(len + j).array();
    }
    for (Eigen::Index c = 0; c < tokens.cols(); ++c) {
        if (sd(c) == T(0)) continue;
        const T k = d_sd(c) / (T(len) * sd(c));
        for (Eigen::Index i = 0; i < len; ++i) d_tok(i, c) += k * (tokens(i, c) - mean(c));
    }
    return d_tok;
}

template <typename T>
MatrixT<T> padding_noise(int num_tokens, int total, int dim, std::uint64_t seed) {
    const int pad = total - num_tokens;
    if (pad < 0) throw ParameterError("padding_noise: more tokens than slots");
    MatrixT<T> z(pad, dim);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = static_cast<T>(normal(rng));
    return z;
}

template <typename T>
MatrixT<T> noisy_replicate_pad(const MatrixT<T>& tokens, int total, double beta_txt,
                               std::mt19937_64& rng) {
    check_pad_args(tokens.rows(), total, beta_txt);
    const MatrixT<T> z = padding_noise<T>(static_cast<int>(tokens.rows()), total,
                                          static_cast<int>(tokens.cols()), rng());
    return replicate_pad(tokens, total, beta_txt, z);
}

ConditioningBundle drop_conditions(ConditioningBundle bundle, double p_sem, double p_ctl,
                                   std::mt19937_64& rng) {
    if (!(p_sem >= 0.0 && p_sem <= 1.0 && p_ctl >= 0.0 && p_ctl <= 1.0)) {
        throw ParameterError("drop_conditions: probabilities must lie in [0, 1]");
    }
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const double u_sem = unif(rng);
    const double u_ctl = unif(rng);
    if (u_sem < p_sem) bundle.drop_semantic = true;
    if (u_ctl < p_ctl) bundle.drop_control = true;
    return bundle;
}

std::vector<int> tokenize(std::string_view prompt, int vocab, int max_tokens) {
    if (vocab <= 0) throw ParameterError("tokenize: vocab must be positive");
    std::vector<int> ids;
    std::size_t i = 0;
    while (i < prompt.size() && static_cast<int>(ids.size()) < max_tokens) {
        while (i < prompt.size() && std::isspace(static_cast<unsigned char>(prompt[i]))) ++i;
        if (i == prompt.size()) break;
        std::uint64_t h = 1469598103934665603ULL;
        while (i < prompt.size() && !std::isspace(static_cast<unsigned char>(prompt[i]))) {
            h ^= static_cast<unsigned char>(std::tolower(static_cast<unsigned char>(prompt[i])));
            h *= 1099511628211ULL;
            ++i;
        }
        ids.push_back(static_cast<int>(h % static_cast<std::uint64_t>(vocab)));
    }
    return ids;
}

#define DFKT_INSTANTIATE(T)                                                                        \
    template void sincos_embed_into<T>(double, int, T*);                                           \
    template MatrixT<T> embed_control<T>(const std::vector<ControlMeta>&,                          \
                                         const std::vector<double>&, const ParamSet<T>&,           \
                                         const ControlEmbedder&, const ControlWeightProfile&,      \
                                         ControlEmbedCache<T>*);                                   \
    template void embed_control_backward<T>(const ControlEmbedCache<T>&, const MatrixT<T>&,        \
                                            const ParamSet<T>&, ParamSet<T>&);                     \
    template MatrixT<T> replicate_pad<T>(const MatrixT<T>&, int, double, const MatrixT<T>&);       \
    template MatrixT<T> replicate_pad_backward<T>(const MatrixT<T>&, int, double,                  \
                                                  const MatrixT<T>&, const MatrixT<T>&);           \
    template MatrixT<T> noisy_replicate_pad<T>(const MatrixT<T>&, int, double, std::mt19937_64&);  \
    template MatrixT<T> padding_noise<T>(int, int, int, std::uint64_t);

DFKT_INSTANTIATE(float)
DFKT_INSTANTIATE(double)
#undef DFKT_INSTANTIATE

} // namespace dfkt
