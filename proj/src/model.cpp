#include "dfkt/model.hpp"

#include <cmath>
#include <random>
#include <string>

#include "dfkt/errors.hpp"
#include "dfkt/nn.hpp"
#include "dfkt/noising.hpp"

namespace dfkt {

template <typename T>
struct BlockCache {
    MatrixT<T> h_in, ln1, a1, qkv, qn, kn, attn, o, h_mid, ln2, a2, m_pre, m_act, m_out, mod;
    MatrixT<T> rq, rk; // per (row, head) RMS of raw queries / keys
    std::vector<T> ln1_inv, ln2_inv;
    std::vector<MatrixT<T>> probs; // index b * heads + h
};

template <typename T>
const MatrixT<T>& ForwardCache<T>::normalized_queries(int i) const {
    return blocks.at(static_cast<std::size_t>(i)).qn;
}
template <typename T>
const MatrixT<T>& ForwardCache<T>::normalized_keys(int i) const {
    return blocks.at(static_cast<std::size_t>(i)).kn;
}

template <typename T>
ForwardCache<T>::ForwardCache() = default;
template <typename T>
ForwardCache<T>::~ForwardCache() = default;
template <typename T>
ForwardCache<T>::ForwardCache(ForwardCache&&) noexcept = default;
template <typename T>
ForwardCache<T>& ForwardCache<T>::operator=(ForwardCache&&) noexcept = default;

namespace {

constexpr double kNormEps = 1e-6;

std::string blk(int i, const char* leaf) { return "blk" + std::to_string(i) + "." + leaf; }

// Rows [b * rows_per, (b + 1) * rows_per) are scaled / shifted by row b of mod.
template <typename T>
void modulate(const MatrixT<T>& x, const MatrixT<T>& mod, int shift_col, int scale_col, int width,
              int rows_per, MatrixT<T>& y) {
    y.resize(x.rows(), x.cols());
    for (Eigen::Index b = 0; b < mod.rows(); ++b) {
        const auto shift = mod.row(b).segment(shift_col, width);
        const auto scale = (mod.row(b).segment(scale_col, width).array() + T(1)).matrix();
        for (int r = 0; r < rows_per; ++r) {
            const Eigen::Index row = b * rows_per + r;
            y.row(row) = (x.row(row).array() * scale.array() + shift.array()).matrix();
        }
    }
}

// Backward of modulate: returns d x and accumulates into d mod.
template <typename T>
MatrixT<T> modulate_backward(const MatrixT<T>& x, const MatrixT<T>& mod, const MatrixT<T>& dy,
                             int shift_col, int scale_col, int width, int rows_per, MatrixT<T>& dmod) {
    MatrixT<T> dx(dy.rows(), dy.cols());
    for (Eigen::Index b = 0; b < mod.rows(); ++b) {
        const auto scale = (mod.row(b).segment(scale_col, width).array() + T(1)).matrix();
        const auto block_dy = dy.middleRows(b * rows_per, rows_per);
        const auto block_x = x.middleRows(b * rows_per, rows_per);
        dmod.row(b).segment(shift_col, width) += block_dy.colwise().sum();
        dmod.row(b).segment(scale_col, width) += block_dy.cwiseProduct(block_x).colwise().sum();
        for (int r = 0; r < rows_per; ++r) {
            dx.row(b * rows_per + r) = block_dy.row(r).cwiseProduct(scale);
        }
    }
    return dx;
}

// h_out = h + gate_b * y, gate taken from a column segment of mod.
template <typename T>
void gated_add(MatrixT<T>& h, const MatrixT<T>& y, const MatrixT<T>& mod, int gate_col, int width,
               int rows_per) {
    for (Eigen::Index b = 0; b < mod.rows(); ++b) {
        const auto gate = mod.row(b).segment(gate_col, width);
        for (int r = 0; r < rows_per; ++r) {
            const Eigen::Index row = b * rows_per + r;
            h.row(row) += y.row(row).cwiseProduct(gate);
        }
    }
}

template <typename T>
MatrixT<T> gated_add_backward(const MatrixT<T>& dh, const MatrixT<T>& y, const MatrixT<T>& mod,
                              int gate_col, int width, int rows_per, MatrixT<T>& dmod) {
    MatrixT<T> dy(dh.rows(), dh.cols());
    for (Eigen::Index b = 0; b < mod.rows(); ++b) {
        const auto gate = mod.row(b).segment(gate_col, width);
        const auto block_dh = dh.middleRows(b * rows_per, rows_per);
        dmod.row(b).segment(gate_col, width) +=
            block_dh.cwiseProduct(y.middleRows(b * rows_per, rows_per)).colwise().sum();
        for (int r = 0; r < rows_per; ++r) dy.row(b * rows_per + r) = block_dh.row(r).cwiseProduct(gate);
    }
    return dy;
}

void check_inputs(const ModelConfig& cfg, Eigen::Index batch, Eigen::Index cols, std::size_t n_t,
                  std::size_t n_bundles, const NoiseSchedule& sched, const GridDescriptor& grid) {
    if (cols != cfg.pixels()) {
        throw ShapeError("forward: image batch has " + std::to_string(cols) + " values per sample, expected " +
                         std::to_string(cfg.pixels()));
    }
    if (n_t != static_cast<std::size_t>(batch) || n_bundles != static_cast<std::size_t>(batch)) {
        throw ShapeError("forward: need one step index and one bundle per sample");
    }
    if (grid.grid_size != cfg.grid_size()) {
        throw ShapeError("forward: positional grid does not match image_size / patch_size");
    }
    if (sched.num_steps() < 2) throw ParameterError("forward: invalid noise schedule");
}

} // namespace

void ModelConfig::validate() const {
    auto fail = [](const std::string& what) { throw ParameterError("ModelConfig: " + what); };
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0) {
        fail("image_size must be a positive multiple of patch_size");
    }
    if (channels <= 0 || depth <= 0 || width <= 0 || heads <= 0) fail("sizes must be positive");
    if (width % heads != 0) fail("width must be divisible by heads");
    if (width % 4 != 0) fail("width must be divisible by 4 for 2D sinusoidal embeddings");
    if (tokens <= 0 || vocab <= 0 || cond_width <= 0 || mlp_ratio <= 0) fail("sizes must be positive");
    if (embed_dim <= 0 || embed_dim % 2 != 0) fail("embed_dim must be positive and even");
    if (!(text_pad_noise >= 0.0)) fail("text_pad_noise must be nonnegative");
    if (control_profile.kind == ControlProfileKind::power_cosine && !(control_profile.alpha > 0.0)) {
        fail("control profile alpha must be positive");
    }
}

std::vector<TensorSpec> model_layout(const ModelConfig& cfg) {
    cfg.validate();
    const int d = cfg.width;
    const int dc = cfg.cond_width;
    const int pd = cfg.patch_dim();
    const int hid = cfg.mlp_ratio * d;
    std::vector<TensorSpec> specs = {
        {"patch.w", {pd, d}},
        {"patch.b", {d}},
        {"sem.table", {cfg.vocab, d}},
        {"sem.null", {d}},
        {"time.w1", {cfg.embed_dim, dc}},
        {"time.b1", {dc}},
        {"time.w2", {dc, dc}},
        {"time.b2", {dc}},
    };
    for (auto& s : cfg.control_embedder().layout()) specs.push_back(std::move(s));
    specs.push_back({"ctl.null", {dc}});
    for (int i = 0; i < cfg.depth; ++i) {
        specs.push_back({blk(i, "mod.w"), {dc, 6 * d}});
        specs.push_back({blk(i, "mod.b"), {6 * d}});
        specs.push_back({blk(i, "qkv.w"), {d, 3 * d}});
        specs.push_back({blk(i, "qkv.b"), {3 * d}});
        specs.push_back({blk(i, "out.w"), {d, d}});
        specs.push_back({blk(i, "out.b"), {d}});
        specs.push_back({blk(i, "mlp.w1"), {d, hid}});
        specs.push_back({blk(i, "mlp.b1"), {hid}});
        specs.push_back({blk(i, "mlp.w2"), {hid, d}});
        specs.push_back({blk(i, "mlp.b2"), {d}});
    }
    specs.push_back({"final.mod.w", {dc, 2 * d}});
    specs.push_back({"final.mod.b", {2 * d}});
    specs.push_back({"final.w", {d, pd}});
    specs.push_back({"final.b", {pd}});
    return specs;
}

ParamSet<float> init_params(const ModelConfig& cfg, std::uint64_t seed) {
    ParamSet<float> p;
    p.specs = model_layout(cfg);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    auto zero_init = [](const std::string& name) {
        return name.ends_with("mod.w") || name.starts_with("ctl_h.w2") ||
               name.starts_with("ctl_l.w2") || name.ends_with(".null");
    };
    for (const auto& spec : p.specs) {
        MatrixF m = MatrixF::Zero(spec.rows(), spec.cols());
        const bool is_bias = spec.dims.size() == 1;
        if (!is_bias && !zero_init(spec.name)) {
            // Embedding tables use unit-scale rows; dense layers 1/sqrt(fan_in).
            const double sd = spec.name == "sem.table" ? 1.0 : 1.0 / std::sqrt(spec.rows());
            for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(sd * normal(rng));
        }
        p.tensors.push_back(std::move(m));
    }
    return p;
}

Model make_model(const ModelConfig& cfg, std::uint64_t seed, GridMode mode) {
    Model m;
    m.config = cfg;
    m.grid = GridDescriptor{cfg.grid_size(), 1, mode};
    m.params = init_params(cfg, seed);
    return m;
}

Model resample_for_resolution(const Model& model, const GridDescriptor& new_grid) {
    new_grid.validate();
    Model out = model;
    out.config.image_size = new_grid.grid_size * model.config.patch_size;
    out.config.validate();
    out.grid = new_grid;
    return out;
}

template <typename T>
MatrixT<T> patchify(const MatrixT<T>& images, int channels, int image_size, int patch_size) {
    const int g = image_size / patch_size;
    const int pd = channels * patch_size * patch_size;
    const Eigen::Index batch = images.rows();
    MatrixT<T> out(batch * g * g, pd);
    for (Eigen::Index b = 0; b < batch; ++b) {
        const T* img = images.row(b).data();
        for (int gy = 0; gy < g; ++gy) {
            for (int gx = 0; gx < g; ++gx) {
                T* dst = out.row(b * g * g + gy * g + gx).data();
                int k = 0;
                for (int c = 0; c < channels; ++c) {
                    for (int py = 0; py < patch_size; ++py) {
                        const T* src = img + (static_cast<std::size_t>(c) * image_size +
                                              gy * patch_size + py) * image_size + gx * patch_size;
                        for (int px = 0; px < patch_size; ++px) dst[k++] = src[px];
                    }
                }
            }
        }
    }
    return out;
}

template <typename T>
MatrixT<T> unpatchify(const MatrixT<T>& patches, int batch, int channels, int image_size, int patch_size) {
    const int g = image_size / patch_size;
    MatrixT<T> out(batch, static_cast<Eigen::Index>(channels) * image_size * image_size);
    for (Eigen::Index b = 0; b < batch; ++b) {
        T* img = out.row(b).data();
        for (int gy = 0; gy < g; ++gy) {
            for (int gx = 0; gx < g; ++gx) {
                const T* src = patches.row(b * g * g + gy * g + gx).data();
                int k = 0;
                for (int c = 0; c < channels; ++c) {
                    for (int py = 0; py < patch_size; ++py) {
                        T* dst = img + (static_cast<std::size_t>(c) * image_size + gy * patch_size + py) *
                                           image_size + gx * patch_size;
                        for (int px = 0; px < patch_size; ++px) dst[px] = src[k++];
                    }
                }
            }
        }
    }
    return out;
}

template <typename T>
MatrixT<T> forward(const ModelConfig& cfg, const ParamSet<T>& params, const MatrixT<T>& x_t,
                   const std::vector<int>& t, const std::vector<ConditioningBundle>& bundles,
                   const NoiseSchedule& sched, const GridDescriptor& grid, ForwardCache<T>* cache,
                   ForwardCounters* counters) {
    check_inputs(cfg, x_t.rows(), x_t.cols(), t.size(), bundles.size(), sched, grid);
    ForwardCache<T> local;
    ForwardCache<T>& c = cache != nullptr ? *cache : local;

    const int batch = static_cast<int>(x_t.rows());
    const int d = cfg.width;
    const int n_img = cfg.num_patches();
    const int n_sem = cfg.tokens;
    const int seq = n_img + n_sem;
    const int heads = cfg.heads;
    const int dh = d / heads;
    const int T_steps = sched.num_steps();
    c.batch = batch;
    c.seq = seq;

    // Image tokens: patch projection + positional embedding.
    c.patches = patchify(x_t, cfg.channels, cfg.image_size, cfg.patch_size);
    MatrixT<T> img_tok;
    nn::linear(c.patches, params["patch.w"], params["patch.b"], img_tok);
    const MatrixT<T> pos = sincos_2d(grid, d).template cast<T>();

    MatrixT<T> h(static_cast<Eigen::Index>(batch) * seq, d);
    c.sem_src.assign(static_cast<std::size_t>(batch), MatrixT<T>());
    c.sem_noise.assign(static_cast<std::size_t>(batch), MatrixT<T>());
    const MatrixT<T>& table = params["sem.table"];
    const MatrixT<T>& null_tok = params["sem.null"];
    for (int b = 0; b < batch; ++b) {
        const auto base = static_cast<Eigen::Index>(b) * seq;
        h.middleRows(base, n_img) = img_tok.middleRows(static_cast<Eigen::Index>(b) * n_img, n_img) + pos;
        const ConditioningBundle& bundle = bundles[static_cast<std::size_t>(b)];
        if (bundle.drop_semantic) {
            h.middleRows(base + n_img, n_sem).rowwise() = null_tok.row(0);
            continue;
        }
        const auto& ids = bundle.tokens;
        if (ids.empty() || static_cast<int>(ids.size()) > n_sem) {
            throw ShapeError("forward: semantic token count must lie in [1, tokens]");
        }
        if (cfg.mode == SemanticMode::class_label && ids.size() != 1) {
            throw ShapeError("forward: class mode expects exactly one token");
        }
        MatrixT<T> src(static_cast<Eigen::Index>(ids.size()), d);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || ids[i] >= cfg.vocab) throw ShapeError("forward: token id out of range");
            src.row(static_cast<Eigen::Index>(i)) = table.row(ids[i]);
        }
        const double beta_txt = cfg.mode == SemanticMode::text ? cfg.text_pad_noise : 0.0;
        MatrixT<T> z;
        if (beta_txt > 0.0) z = padding_noise<T>(static_cast<int>(ids.size()), n_sem, d, bundle.pad_seed);
        h.middleRows(base + n_img, n_sem) = replicate_pad(src, n_sem, beta_txt, z);
        c.sem_src[static_cast<std::size_t>(b)] = std::move(src);
        c.sem_noise[static_cast<std::size_t>(b)] = std::move(z);
    }

    // Conditioning vector: timestep embedding + control embedding.
    c.t_feat.resize(batch, cfg.embed_dim);
    std::vector<double> t_norm(static_cast<std::size_t>(batch));
    std::vector<ControlMeta> metas(static_cast<std::size_t>(batch));
    for (int b = 0; b < batch; ++b) {
        const int step = t[static_cast<std::size_t>(b)];
        if (step < 0 || step >= T_steps) throw ShapeError("forward: step index out of range");
        sincos_embed_into(static_cast<double>(step), cfg.embed_dim, c.t_feat.row(b).data());
        t_norm[static_cast<std::size_t>(b)] = static_cast<double>(step) / T_steps;
        metas[static_cast<std::size_t>(b)] = bundles[static_cast<std::size_t>(b)].control;
    }
    MatrixT<T> t_out;
    nn::linear(c.t_feat, params["time.w1"], params["time.b1"], c.t_pre);
    c.t_act = nn::silu(c.t_pre);
    nn::linear(c.t_act, params["time.w2"], params["time.b2"], t_out);

    MatrixT<T> ctl;
    if (cfg.use_control) {
        ctl = embed_control(metas, t_norm, params, cfg.control_embedder(), cfg.control_profile, &c.ctl);
    } else {
        ctl.resize(batch, cfg.cond_width);
    }
    for (int b = 0; b < batch; ++b) {
        if (!cfg.use_control || bundles[static_cast<std::size_t>(b)].drop_control) {
            ctl.row(b) = params["ctl.null"].row(0);
        }
    }
    c.cond = t_out + ctl;
    c.cond_act = nn::silu(c.cond);

    // Transformer blocks.
    const T attn_scale = T(1) / std::sqrt(static_cast<T>(dh));
    c.blocks.resize(static_cast<std::size_t>(cfg.depth));
    for (int i = 0; i < cfg.depth; ++i) {
        BlockCache<T>& k = c.blocks[static_cast<std::size_t>(i)];
        k.h_in = h;
        nn::linear(c.cond_act, params[blk(i, "mod.w")], params[blk(i, "mod.b")], k.mod);

        nn::layer_norm(h, k.ln1, k.ln1_inv, T(kNormEps));
        modulate(k.ln1, k.mod, 0, d, d, seq, k.a1);
        nn::linear(k.a1, params[blk(i, "qkv.w")], params[blk(i, "qkv.b")], k.qkv);

        k.qn.resize(h.rows(), d);
        k.kn.resize(h.rows(), d);
        k.rq.resize(h.rows(), heads);
        k.rk.resize(h.rows(), heads);
        k.attn.resize(h.rows(), d);
        k.probs.resize(static_cast<std::size_t>(batch) * heads);
        for (Eigen::Index r = 0; r < h.rows(); ++r) {
            for (int hd = 0; hd < heads; ++hd) {
                const auto q = k.qkv.row(r).segment(hd * dh, dh);
                const auto kk = k.qkv.row(r).segment(d + hd * dh, dh);
                const T rq = std::sqrt(q.squaredNorm() / T(dh) + T(kNormEps));
                const T rk = std::sqrt(kk.squaredNorm() / T(dh) + T(kNormEps));
                k.rq(r, hd) = rq;
                k.rk(r, hd) = rk;
                k.qn.row(r).segment(hd * dh, dh) = q / rq;
                k.kn.row(r).segment(hd * dh, dh) = kk / rk;
            }
        }
        for (int b = 0; b < batch; ++b) {
            const auto base = static_cast<Eigen::Index>(b) * seq;
            for (int hd = 0; hd < heads; ++hd) {
                const auto q = k.qn.block(base, hd * dh, seq, dh);
                const auto kk = k.kn.block(base, hd * dh, seq, dh);
                const auto v = k.qkv.block(base, 2 * d + hd * dh, seq, dh);
                MatrixT<T> logits = (q * kk.transpose()) * attn_scale;
                for (Eigen::Index r = 0; r < logits.rows(); ++r) {
                    const T mx = logits.row(r).maxCoeff();
                    logits.row(r) = (logits.row(r).array() - mx).exp().matrix();
                    logits.row(r) /= logits.row(r).sum();
                }
                k.attn.block(base, hd * dh, seq, dh).noalias() = logits * v;
                k.probs[static_cast<std::size_t>(b) * heads + hd] = std::move(logits);
            }
        }
        nn::linear(k.attn, params[blk(i, "out.w")], params[blk(i, "out.b")], k.o);
        gated_add(h, k.o, k.mod, 2 * d, d, seq);
        k.h_mid = h;

        nn::layer_norm(h, k.ln2, k.ln2_inv, T(kNormEps));
        modulate(k.ln2, k.mod, 3 * d, 4 * d, d, seq, k.a2);
        nn::linear(k.a2, params[blk(i, "mlp.w1")], params[blk(i, "mlp.b1")], k.m_pre);
        k.m_act = nn::silu(k.m_pre);
        nn::linear(k.m_act, params[blk(i, "mlp.w2")], params[blk(i, "mlp.b2")], k.m_out);
        gated_add(h, k.m_out, k.mod, 5 * d, d, seq);
    }

    // Output head on image tokens only; semantic-token outputs are discarded.
    MatrixT<T> h_img(static_cast<Eigen::Index>(batch) * n_img, d);
    for (int b = 0; b < batch; ++b) {
        h_img.middleRows(static_cast<Eigen::Index>(b) * n_img, n_img) =
            h.middleRows(static_cast<Eigen::Index>(b) * seq, n_img);
    }
    nn::linear(c.cond_act, params["final.mod.w"], params["final.mod.b"], c.fmod);
    nn::layer_norm(h_img, c.lnf, c.lnf_inv, T(kNormEps));
    modulate(c.lnf, c.fmod, 0, d, d, n_img, c.af);
    MatrixT<T> out_tok;
    nn::linear(c.af, params["final.w"], params["final.b"], out_tok);
    MatrixT<T> out = unpatchify(out_tok, batch, cfg.channels, cfg.image_size, cfg.patch_size);
    if (!out.allFinite()) throw NumericError("forward: non-finite activations in noise prediction");

    if (counters != nullptr) {
        for (const auto& bundle : bundles) {
            ++counters->samples;
            if (bundle.drop_semantic) ++counters->null_semantic;
            if (bundle.drop_control) ++counters->null_control;
        }
    }
    return out;
}

template <typename T>
void backward(const ModelConfig& cfg, const ParamSet<T>& params, const ForwardCache<T>& c,
              const std::vector<ConditioningBundle>& bundles, const MatrixT<T>& d_out,
              ParamSet<T>& grads) {
    const int batch = c.batch;
    const int seq = c.seq;
    const int d = cfg.width;
    const int n_img = cfg.num_patches();
    const int n_sem = cfg.tokens;
    const int heads = cfg.heads;
    const int dh = d / heads;
    const T attn_scale = T(1) / std::sqrt(static_cast<T>(dh));

    MatrixT<T> d_cond_act = MatrixT<T>::Zero(batch, cfg.cond_width);

    // Output head.
    const MatrixT<T> d_tok = patchify(d_out, cfg.channels, cfg.image_size, cfg.patch_size);
    MatrixT<T> d_af;
    nn::linear_backward(c.af, params["final.w"], d_tok, &d_af, grads["final.w"], grads["final.b"]);
    MatrixT<T> d_fmod = MatrixT<T>::Zero(batch, 2 * d);
    const MatrixT<T> d_lnf = modulate_backward(c.lnf, c.fmod, d_af, 0, d, d, n_img, d_fmod);
    const MatrixT<T> d_himg = nn::layer_norm_backward(c.lnf, c.lnf_inv, d_lnf);
    MatrixT<T> d_ca;
    nn::linear_backward(c.cond_act, params["final.mod.w"], d_fmod, &d_ca, grads["final.mod.w"],
                        grads["final.mod.b"]);
    d_cond_act += d_ca;

    MatrixT<T> dh_mat = MatrixT<T>::Zero(static_cast<Eigen::Index>(batch) * seq, d);
    for (int b = 0; b < batch; ++b) {
        dh_mat.middleRows(static_cast<Eigen::Index>(b) * seq, n_img) =
            d_himg.middleRows(static_cast<Eigen::Index>(b) * n_img, n_img);
    }

    for (int i = cfg.depth - 1; i >= 0; --i) {
        const BlockCache<T>& k = c.blocks[static_cast<std::size_t>(i)];
        MatrixT<T> d_mod = MatrixT<T>::Zero(batch, 6 * d);

        // MLP sub-block: h_out = h_mid + gate2 * mlp(mod(ln(h_mid))).
        const MatrixT<T> d_mout = gated_add_backward(dh_mat, k.m_out, k.mod, 5 * d, d, seq, d_mod);
        MatrixT<T> d_mact;
        nn::linear_backward(k.m_act, params[blk(i, "mlp.w2")], d_mout, &d_mact, grads[blk(i, "mlp.w2")],
                            grads[blk(i, "mlp.b2")]);
        const MatrixT<T> d_mpre = nn::silu_backward(k.m_pre, d_mact);
        MatrixT<T> d_a2;
        nn::linear_backward(k.a2, params[blk(i, "mlp.w1")], d_mpre, &d_a2, grads[blk(i, "mlp.w1")],
                            grads[blk(i, "mlp.b1")]);
        const MatrixT<T> d_ln2 = modulate_backward(k.ln2, k.mod, d_a2, 3 * d, 4 * d, d, seq, d_mod);
        dh_mat += nn::layer_norm_backward(k.ln2, k.ln2_inv, d_ln2);

        // Attention sub-block: h_mid = h_in + gate1 * out(attn(mod(ln(h_in)))).
        const MatrixT<T> d_o = gated_add_backward(dh_mat, k.o, k.mod, 2 * d, d, seq, d_mod);
        MatrixT<T> d_attn;
        nn::linear_backward(k.attn, params[blk(i, "out.w")], d_o, &d_attn, grads[blk(i, "out.w")],
                            grads[blk(i, "out.b")]);

        MatrixT<T> d_qkv(k.qkv.rows(), 3 * d);
        MatrixT<T> d_qn(k.qkv.rows(), d);
        MatrixT<T> d_kn(k.qkv.rows(), d);
        for (int b = 0; b < batch; ++b) {
            const auto base = static_cast<Eigen::Index>(b) * seq;
            for (int hd = 0; hd < heads; ++hd) {
                const MatrixT<T>& p = k.probs[static_cast<std::size_t>(b) * heads + hd];
                const auto q = k.qn.block(base, hd * dh, seq, dh);
                const auto kk = k.kn.block(base, hd * dh, seq, dh);
                const auto v = k.qkv.block(base, 2 * d + hd * dh, seq, dh);
                const auto d_head = d_attn.block(base, hd * dh, seq, dh);
                d_qkv.block(base, 2 * d + hd * dh, seq, dh).noalias() = p.transpose() * d_head;
                MatrixT<T> d_p = d_head * v.transpose();
                for (Eigen::Index r = 0; r < d_p.rows(); ++r) {
                    const T dot = d_p.row(r).dot(p.row(r));
                    d_p.row(r) = (p.row(r).array() * (d_p.row(r).array() - dot)).matrix();
                }
                d_p *= attn_scale;
                d_qn.block(base, hd * dh, seq, dh).noalias() = d_p * kk;
                d_kn.block(base, hd * dh, seq, dh).noalias() = d_p.transpose() * q;
            }
        }
        // RMS normalization of queries and keys, per head.
        for (Eigen::Index r = 0; r < k.qkv.rows(); ++r) {
            for (int hd = 0; hd < heads; ++hd) {
                const auto yq = k.qn.row(r).segment(hd * dh, dh);
                const auto gq = d_qn.row(r).segment(hd * dh, dh);
                d_qkv.row(r).segment(hd * dh, dh) = (gq - yq * (gq.dot(yq) / T(dh))) / k.rq(r, hd);
                const auto yk = k.kn.row(r).segment(hd * dh, dh);
                const auto gk = d_kn.row(r).segment(hd * dh, dh);
                d_qkv.row(r).segment(d + hd * dh, dh) = (gk - yk * (gk.dot(yk) / T(dh))) / k.rk(r, hd);
            }
        }
        MatrixT<T> d_a1;
        nn::linear_backward(k.a1, params[blk(i, "qkv.w")], d_qkv, &d_a1, grads[blk(i, "qkv.w")],
                            grads[blk(i, "qkv.b")]);
        const MatrixT<T> d_ln1 = modulate_backward(k.ln1, k.mod, d_a1, 0, d, d, seq, d_mod);
        dh_mat += nn::layer_norm_backward(k.ln1, k.ln1_inv, d_ln1);

        nn::linear_backward(c.cond_act, params[blk(i, "mod.w")], d_mod, &d_ca, grads[blk(i, "mod.w")],
                            grads[blk(i, "mod.b")]);
        d_cond_act += d_ca;
    }

    // Conditioning vector.
    const MatrixT<T> d_cond = nn::silu_backward(c.cond, d_cond_act);
    MatrixT<T> d_tact;
    nn::linear_backward(c.t_act, params["time.w2"], d_cond, &d_tact, grads["time.w2"], grads["time.b2"]);
    const MatrixT<T> d_tpre = nn::silu_backward(c.t_pre, d_tact);
    nn::linear_backward<T>(c.t_feat, params["time.w1"], d_tpre, nullptr, grads["time.w1"], grads["time.b1"]);

    MatrixT<T> d_ctl = d_cond;
    for (int b = 0; b < batch; ++b) {
        if (!cfg.use_control || bundles[static_cast<std::size_t>(b)].drop_control) {
            grads["ctl.null"].row(0) += d_ctl.row(b);
            d_ctl.row(b).setZero();
        }
    }
    if (cfg.use_control) embed_control_backward(c.ctl, d_ctl, params, grads);

    // Token inputs.
    MatrixT<T> d_patch_tok(static_cast<Eigen::Index>(batch) * n_img, d);
    MatrixT<T>& g_table = grads["sem.table"];
    MatrixT<T>& g_null = grads["sem.null"];
    for (int b = 0; b < batch; ++b) {
        const auto base = static_cast<Eigen::Index>(b) * seq;
        d_patch_tok.middleRows(static_cast<Eigen::Index>(b) * n_img, n_img) = dh_mat.middleRows(base, n_img);
        const auto d_sem = dh_mat.middleRows(base + n_img, n_sem);
        const ConditioningBundle& bundle = bundles[static_cast<std::size_t>(b)];
        if (bundle.drop_semantic) {
            g_null.row(0) += d_sem.colwise().sum();
            continue;
        }
        const MatrixT<T>& src = c.sem_src[static_cast<std::size_t>(b)];
        const double beta_txt = cfg.mode == SemanticMode::text ? cfg.text_pad_noise : 0.0;
        const MatrixT<T> d_src =
            replicate_pad_backward(src, n_sem, beta_txt, c.sem_noise[static_cast<std::size_t>(b)], MatrixT<T>(d_sem));
        for (std::size_t j = 0; j < bundle.tokens.size(); ++j) {
            g_table.row(bundle.tokens[j]) += d_src.row(static_cast<Eigen::Index>(j));
        }
    }
    nn::linear_backward<T>(c.patches, params["patch.w"], d_patch_tok, nullptr, grads["patch.w"],
                           grads["patch.b"]);
}

namespace {

template <typename T>
MatrixT<T> noised_inputs(const ModelConfig& cfg, const TrainBatch<T>& batch, const NoiseSchedule& sched,
                         const LossWeighting& weighting, std::vector<double>& weights) {
    const Eigen::Index n = batch.x0.rows();
    if (n == 0) throw ParameterError("loss_and_grads: empty batch");
    if (batch.eps.rows() != n || batch.eps.cols() != batch.x0.cols() || batch.x0.cols() != cfg.pixels()) {
        throw ShapeError("loss_and_grads: x0 / eps shape mismatch");
    }
    if (batch.t.size() != static_cast<std::size_t>(n) || batch.bundles.size() != static_cast<std::size_t>(n)) {
        throw ShapeError("loss_and_grads: need one step and one bundle per sample");
    }
    MatrixT<T> x_t(n, batch.x0.cols());
    weights.resize(static_cast<std::size_t>(n));
    for (Eigen::Index b = 0; b < n; ++b) {
        const int step = batch.t[static_cast<std::size_t>(b)];
        if (step < 0 || step >= sched.num_steps()) throw ShapeError("loss_and_grads: step out of range");
        const double sigma = sched.sigma(step);
        edm_noising_into<T>({batch.x0.row(b).data(), static_cast<std::size_t>(x_t.cols())}, sigma,
                            {batch.eps.row(b).data(), static_cast<std::size_t>(x_t.cols())},
                            {x_t.row(b).data(), static_cast<std::size_t>(x_t.cols())});
        weights[static_cast<std::size_t>(b)] = weighting(sigma);
    }
    return x_t;
}

template <typename T>
double weighted_loss(const MatrixT<T>& eps_hat, const MatrixT<T>& eps, const std::vector<double>& weights) {
    double loss = 0.0;
    const double numel = static_cast<double>(eps.cols());
    for (Eigen::Index b = 0; b < eps.rows(); ++b) {
        double sq = 0.0;
        for (Eigen::Index i = 0; i < eps.cols(); ++i) {
            const double diff = static_cast<double>(eps_hat(b, i)) - static_cast<double>(eps(b, i));
            sq += diff * diff;
        }
        loss += weights[static_cast<std::size_t>(b)] * sq / numel;
    }
    return loss / static_cast<double>(eps.rows());
}

} // namespace

template <typename T>
GradientReport<T> loss_and_grads(const ModelConfig& cfg, const ParamSet<T>& params,
                                 const TrainBatch<T>& batch, const NoiseSchedule& sched,
                                 const GridDescriptor& grid, const LossWeighting& weighting) {
    std::vector<double> weights;
    const MatrixT<T> x_t = noised_inputs(cfg, batch, sched, weighting, weights);
    ForwardCache<T> cache;
    const MatrixT<T> eps_hat = forward(cfg, params, x_t, batch.t, batch.bundles, sched, grid, &cache);

    GradientReport<T> report;
    report.loss = weighted_loss(eps_hat, batch.eps, weights);
    if (!std::isfinite(report.loss)) throw NumericError("loss_and_grads: non-finite loss");

    const double norm = 2.0 / (static_cast<double>(batch.eps.rows()) * static_cast<double>(batch.eps.cols()));
    MatrixT<T> d_out = eps_hat - batch.eps;
    for (Eigen::Index b = 0; b < d_out.rows(); ++b) {
        d_out.row(b) *= static_cast<T>(norm * weights[static_cast<std::size_t>(b)]);
    }
    report.grads = params.zeros_like();
    backward(cfg, params, cache, batch.bundles, d_out, report.grads);
    return report;
}

template <typename T>
double loss_only(const ModelConfig& cfg, const ParamSet<T>& params, const TrainBatch<T>& batch,
                 const NoiseSchedule& sched, const GridDescriptor& grid, const LossWeighting& weighting) {
    std::vector<double> weights;
    const MatrixT<T> x_t = noised_inputs(cfg, batch, sched, weighting, weights);
    const MatrixT<T> eps_hat = forward(cfg, params, x_t, batch.t, batch.bundles, sched, grid);
    return weighted_loss(eps_hat, batch.eps, weights);
}

double LossWeighting::operator()(double sigma) const {
    const double inv = 1.0 / (sigma * sigma);
    switch (kind) {
    case Kind::unit:
        return 1.0;
    case Kind::capped:
        return std::min(inv, cap);
    case Kind::inverse_sigma_sq:
        break;
    }
    return inv;
}

#define DFKT_INSTANTIATE(T)                                                                          \
    template struct ForwardCache<T>;                                                                 \
    template MatrixT<T> patchify<T>(const MatrixT<T>&, int, int, int);                               \
    template MatrixT<T> unpatchify<T>(const MatrixT<T>&, int, int, int, int);                        \
    template MatrixT<T> forward<T>(const ModelConfig&, const ParamSet<T>&, const MatrixT<T>&,        \
                                   const std::vector<int>&, const std::vector<ConditioningBundle>&,  \
                                   const NoiseSchedule&, const GridDescriptor&, ForwardCache<T>*,    \
                                   ForwardCounters*);                                                \
    template void backward<T>(const ModelConfig&, const ParamSet<T>&, const ForwardCache<T>&,        \
                              const std::vector<ConditioningBundle>&, const MatrixT<T>&,             \
                              ParamSet<T>&);                                                         \
    template GradientReport<T> loss_and_grads<T>(const ModelConfig&, const ParamSet<T>&,             \
                                                 const TrainBatch<T>&, const NoiseSchedule&,         \
                                                 const GridDescriptor&, const LossWeighting&);       \
    template double loss_only<T>(const ModelConfig&, const ParamSet<T>&, const TrainBatch<T>&,       \
                                 const NoiseSchedule&, const GridDescriptor&, const LossWeighting&);

DFKT_INSTANTIATE(float)
DFKT_INSTANTIATE(double)
#undef DFKT_INSTANTIATE

} // namespace dfkt
