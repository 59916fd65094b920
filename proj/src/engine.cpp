#include "dfkt/engine.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "dfkt/data.hpp"

namespace dfkt {

AdamW::AdamW(const ParamSet<float>& like, double lr, double beta1, double beta2, double eps,
             double weight_decay)
    : m_(like.zeros_like()), v_(like.zeros_like()), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps),
      wd_(weight_decay) {}

void AdamW::step(ParamSet<float>& params, const ParamSet<float>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const double decay = 1.0 - lr_ * wd_;
    for (std::size_t i = 0; i < params.size(); ++i) {
        float* p = params.tensors[i].data();
        const float* g = grads.tensors[i].data();
        float* m = m_.tensors[i].data();
        float* v = v_.tensors[i].data();
        const Eigen::Index n = params.tensors[i].size();
        for (Eigen::Index k = 0; k < n; ++k) {
            const double gk = g[k];
            const double mk = beta1_ * m[k] + (1.0 - beta1_) * gk;
            const double vk = beta2_ * v[k] + (1.0 - beta2_) * gk * gk;
            m[k] = static_cast<float>(mk);
            v[k] = static_cast<float>(vk);
            const double update = (mk / bc1) / (std::sqrt(vk / bc2) + eps_);
            p[k] = static_cast<float>(p[k] * decay - lr_ * update);
        }
    }
}

void Ema::update(const ParamSet<float>& params) {
    const float w = static_cast<float>(1.0 - decay_);
    for (std::size_t i = 0; i < params.size(); ++i) {
        shadow_.tensors[i] += w * (params.tensors[i] - shadow_.tensors[i]);
    }
}

Checkpoint initial_checkpoint(const RunConfig& cfg) {
    cfg.validate();
    Checkpoint c;
    c.config = cfg;
    c.schedule = quadratic_beta_schedule(cfg.schedule.num_steps, cfg.schedule.beta_start, cfg.schedule.beta_end);
    const Model m = make_model(cfg.model, derive_seed(cfg.train.seed, 0));
    c.grid = m.grid;
    c.params = m.params;
    if (cfg.train.ema_decay > 0.0) c.ema = c.params;
    return c;
}

TrainingAborted::TrainingAborted(int step, Checkpoint last_good, const std::string& what)
    : NumericError(what), step_(step), last_good_(std::move(last_good)) {}

namespace {

constexpr std::size_t kLoggedMetas = 4096;

struct Pool {
    MatrixF images;
    std::vector<std::vector<int>> tokens;
    std::vector<ControlMeta> metas;
};

Pool build_pool(const RunConfig& cfg) {
    const ShapeDataset ds(cfg.data, derive_seed(cfg.train.seed, 1));
    const int n = cfg.train.dataset_size;
    Pool pool;
    pool.images.resize(n, cfg.model.pixels());
    pool.tokens.reserve(static_cast<std::size_t>(n));
    pool.metas.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        Sample s = ds.at(static_cast<std::uint64_t>(i));
        std::copy(s.image.data.begin(), s.image.data.end(), pool.images.row(i).data());
        if (cfg.model.mode == SemanticMode::text) {
            pool.tokens.push_back(tokenize(s.prompt, cfg.model.vocab, cfg.model.tokens));
        } else {
            pool.tokens.push_back({s.label});
        }
        pool.metas.push_back(s.meta);
    }
    return pool;
}

double global_norm(const ParamSet<float>& g) {
    double sq = 0.0;
    for (const auto& t : g.tensors) {
        for (Eigen::Index k = 0; k < t.size(); ++k) sq += static_cast<double>(t.data()[k]) * t.data()[k];
    }
    return std::sqrt(sq);
}

bool all_finite(const ParamSet<float>& g) {
    for (const auto& t : g.tensors) {
        if (!t.allFinite()) return false;
    }
    return true;
}

} // namespace

TrainOutcome train(const Checkpoint& start, const StepCallback& on_step) {
    const RunConfig& cfg = start.config;
    cfg.validate();
    const TrainConfig& tc = cfg.train;
    if (start.grid.grid_size != cfg.model.grid_size()) {
        throw ParameterError("train: checkpoint grid does not match model.image_size");
    }

    TrainOutcome out;
    out.checkpoint = start;
    Checkpoint& ck = out.checkpoint;
    if (tc.ema_decay > 0.0) {
        if (!ck.ema) ck.ema = ck.params;
    } else {
        ck.ema.reset();
    }
    if (tc.steps == 0) return out;

    const Pool pool = build_pool(cfg);
    const std::size_t logged = std::min(kLoggedMetas, pool.metas.size());
    ck.train_metas.assign(pool.metas.begin(), pool.metas.begin() + static_cast<std::ptrdiff_t>(logged));

    AdamW opt(ck.params, tc.lr, tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay);
    std::optional<Ema> ema;
    if (ck.ema) ema.emplace(*ck.ema, tc.ema_decay);

    std::mt19937_64 rng(derive_seed(tc.seed, 2));
    std::uniform_int_distribution<int> pick(0, tc.dataset_size - 1);
    std::uniform_int_distribution<int> step_dist(0, start.schedule.num_steps() - 1);
    std::normal_distribution<float> normal(0.0f, 1.0f);

    TrainBatch<float> batch;
    batch.x0.resize(tc.batch, cfg.model.pixels());
    batch.eps.resize(tc.batch, cfg.model.pixels());
    batch.t.resize(static_cast<std::size_t>(tc.batch));
    batch.bundles.resize(static_cast<std::size_t>(tc.batch));
    out.log.reserve(static_cast<std::size_t>(tc.steps));

    for (int step = 0; step < tc.steps; ++step) {
        for (int b = 0; b < tc.batch; ++b) {
            const int idx = pick(rng);
            batch.x0.row(b) = pool.images.row(idx);
            batch.t[static_cast<std::size_t>(b)] = step_dist(rng);
            ConditioningBundle bundle;
            bundle.tokens = pool.tokens[static_cast<std::size_t>(idx)];
            bundle.control = pool.metas[static_cast<std::size_t>(idx)];
            bundle.pad_seed = rng();
            auto& dropped = batch.bundles[static_cast<std::size_t>(b)];
            dropped = drop_conditions(std::move(bundle), tc.p_sem, tc.p_ctl, rng);
            ++out.counters.samples;
            out.counters.null_semantic += dropped.drop_semantic;
            out.counters.null_control += dropped.drop_control;
        }
        for (Eigen::Index k = 0; k < batch.eps.size(); ++k) batch.eps.data()[k] = normal(rng);

        GradientReport<float> rep;
        try {
            rep = loss_and_grads(cfg.model, ck.params, batch, ck.schedule, ck.grid, tc.loss_weight);
        } catch (const NumericError& e) {
            throw TrainingAborted(step, ck, "step " + std::to_string(step) + ": " + e.what());
        }
        if (!std::isfinite(rep.loss) || !all_finite(rep.grads)) {
            throw TrainingAborted(step, ck, "step " + std::to_string(step) + ": non-finite loss or gradient");
        }
        const MetricRow row{step, rep.loss, global_norm(rep.grads), tc.lr};
        opt.step(ck.params, rep.grads);
        if (ema) ema->update(ck.params);
        out.log.push_back(row);
        if (on_step) on_step(row);
    }
    if (ema) ck.ema = ema->shadow();
    return out;
}

std::string metrics_csv(const std::vector<MetricRow>& rows, bool header) {
    std::ostringstream os;
    os.precision(9);
    if (header) os << "step,loss,grad_norm,lr\n";
    for (const auto& r : rows) os << r.step << ',' << r.loss << ',' << r.grad_norm << ',' << r.lr << '\n';
    return os.str();
}

SizePolicy SizePolicy::parse(const std::string& text) {
    SizePolicy p;
    if (text == "train") {
        p.kind = SizePolicyKind::train;
        return p;
    }
    const auto colon = text.find(':');
    const auto comma = text.find(',', colon == std::string::npos ? 0 : colon);
    if (colon == std::string::npos || comma == std::string::npos) {
        throw ParameterError("size policy must be constant:H,W, uniform:LO,HI or train");
    }
    const std::string kind = text.substr(0, colon);
    int a = 0, b = 0;
    try {
        a = std::stoi(text.substr(colon + 1, comma - colon - 1));
        b = std::stoi(text.substr(comma + 1));
    } catch (const std::exception&) {
        throw ParameterError("size policy '" + text + "' has non-integer bounds");
    }
    if (a <= 0 || b <= 0) throw ParameterError("size policy bounds must be positive");
    if (kind == "constant") {
        p.kind = SizePolicyKind::constant;
        p.h = a;
        p.w = b;
    } else if (kind == "uniform") {
        if (a > b) throw ParameterError("uniform size policy needs LO <= HI");
        p.kind = SizePolicyKind::uniform;
        p.lo = a;
        p.hi = b;
    } else {
        throw ParameterError("unknown size policy '" + kind + "'");
    }
    return p;
}

void SampleRequest::validate(int num_train_steps) const {
    if (count < 1) throw ParameterError("SampleRequest: count must be at least 1");
    if (num_steps < 1 || num_steps > num_train_steps) {
        throw ParameterError("SampleRequest: num_steps must lie in [1, T]");
    }
    if (!(resolution_factor > 0.0)) throw ParameterError("SampleRequest: resolution factor must be positive");
    if (chunk < 1) throw ParameterError("SampleRequest: chunk must be positive");
}

std::vector<int> ddim_timesteps(int num_train_steps, int num_steps) {
    if (num_steps < 1 || num_steps > num_train_steps) {
        throw ParameterError("ddim_timesteps: num_steps must lie in [1, T]");
    }
    std::vector<int> out(static_cast<std::size_t>(num_steps));
    if (num_steps == 1) {
        out[0] = num_train_steps - 1;
        return out;
    }
    for (int i = 0; i < num_steps; ++i) {
        const double pos = static_cast<double>(num_steps - 1 - i) * (num_train_steps - 1) / (num_steps - 1);
        out[static_cast<std::size_t>(i)] = static_cast<int>(std::lround(pos));
    }
    return out;
}

template <typename T>
MatrixT<T> ddim_loop(MatrixT<T> x, const NoiseSchedule& sched, const std::vector<int>& steps,
                     const std::function<MatrixT<T>(const MatrixT<T>&, int)>& eps_fn) {
    for (std::size_t i = 0; i < steps.size(); ++i) {
        const int t = steps[i];
        const double ab = sched.alpha_bars[static_cast<std::size_t>(t)];
        const double ab_next = i + 1 < steps.size() ? sched.alpha_bars[static_cast<std::size_t>(steps[i + 1])] : 1.0;
        const MatrixT<T> eps = eps_fn(x, t);
        MatrixT<T> x0 = ((x.array() - static_cast<T>(std::sqrt(1.0 - ab)) * eps.array()) /
                         static_cast<T>(std::sqrt(ab)))
                            .matrix();
        x0 = x0.cwiseMax(T(-1)).cwiseMin(T(1));
        if (i + 1 == steps.size()) {
            x = std::move(x0);
        } else {
            x = static_cast<T>(std::sqrt(ab_next)) * x0 + static_cast<T>(std::sqrt(1.0 - ab_next)) * eps;
        }
        if (!x.allFinite()) throw NumericError("ddim: non-finite sample at step " + std::to_string(t));
    }
    return x;
}

template MatrixF ddim_loop<float>(MatrixF, const NoiseSchedule&, const std::vector<int>&,
                                  const std::function<MatrixF(const MatrixF&, int)>&);
template MatrixD ddim_loop<double>(MatrixD, const NoiseSchedule&, const std::vector<int>&,
                                   const std::function<MatrixD(const MatrixD&, int)>&);

MatrixF guided_eps(const Model& model, const NoiseSchedule& sched, const MatrixF& x, int t,
                   const std::vector<ConditioningBundle>& bundles, const GuidanceParams& g,
                   ForwardCounters* counters) {
    const std::vector<int> ts(bundles.size(), t);
    auto eval = [&](const std::vector<ConditioningBundle>& b) {
        return forward<float>(model.config, model.params, x, ts, b, sched, model.grid, nullptr, counters);
    };
    const MatrixF cs = eval(bundles);
    if (g.lambda == 1.0 && g.beta == 1.0) return cs;

    std::vector<ConditioningBundle> null_both = bundles;
    for (auto& b : null_both) b.drop_semantic = b.drop_control = true;
    const MatrixF oo = eval(null_both);
    MatrixF os;
    if (g.beta != 1.0) {
        std::vector<ConditioningBundle> sem_only = bundles;
        for (auto& b : sem_only) b.drop_control = true;
        os = eval(sem_only);
    } else {
        os = cs; // weight (1 - beta) is zero
    }
    MatrixF out(x.rows(), x.cols());
    const auto n = static_cast<std::size_t>(x.size());
    compose_double_cfg({cs.data(), n}, {os.data(), n}, {oo.data(), n}, g, {out.data(), n});
    return out;
}

MatrixF initial_noise(int count, int pixels, std::uint64_t seed) {
    MatrixF out(count, pixels);
    for (int i = 0; i < count; ++i) {
        std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
        std::normal_distribution<float> normal(0.0f, 1.0f);
        for (int k = 0; k < pixels; ++k) out(i, k) = normal(rng);
    }
    return out;
}

MatrixF sample_bundles(const Model& model, const NoiseSchedule& sched,
                       const std::vector<ConditioningBundle>& bundles, const MatrixF& noise,
                       int num_steps, const GuidanceParams& g, ForwardCounters* counters) {
    if (noise.rows() != static_cast<Eigen::Index>(bundles.size()) || noise.cols() != model.config.pixels()) {
        throw ShapeError("sample_bundles: noise shape does not match bundles and model");
    }
    const auto steps = ddim_timesteps(sched.num_steps(), num_steps);
    return ddim_loop<float>(noise, sched, steps, [&](const MatrixF& x, int t) {
        return guided_eps(model, sched, x, t, bundles, g, counters);
    });
}

std::vector<ConditioningBundle> request_bundles(const Checkpoint& ckpt, const SampleRequest& req) {
    const ModelConfig& mc = ckpt.config.model;
    const int classes = ckpt.config.data.classes;
    if (req.class_id >= classes) throw ParameterError("sample: class id out of range");
    if (req.size.kind == SizePolicyKind::train && ckpt.train_metas.empty()) {
        throw ParameterError("sample: train size policy needs logged training metadata");
    }
    std::mt19937_64 rng(derive_seed(req.seed, 0xC0DEull << 32));
    std::vector<ConditioningBundle> out(static_cast<std::size_t>(req.count));
    for (int i = 0; i < req.count; ++i) {
        auto& b = out[static_cast<std::size_t>(i)];
        const int cls = req.class_id >= 0 ? req.class_id : i % classes;
        if (mc.mode == SemanticMode::text) {
            std::string prompt = req.prompt;
            if (prompt.empty()) {
                ShapeSpec spec;
                spec.class_id = cls;
                prompt = caption(spec);
            }
            b.tokens = tokenize(prompt, mc.vocab, mc.tokens);
        } else {
            b.tokens = {cls};
        }
        b.pad_seed = derive_seed(req.seed, static_cast<std::uint64_t>(i));
        switch (req.size.kind) {
        case SizePolicyKind::constant:
            b.control.orig_h = req.size.h > 0 ? req.size.h : mc.image_size;
            b.control.orig_w = req.size.w > 0 ? req.size.w : mc.image_size;
            break;
        case SizePolicyKind::uniform: {
            std::uniform_int_distribution<int> d(req.size.lo, req.size.hi);
            b.control.orig_h = d(rng);
            b.control.orig_w = d(rng);
            break;
        }
        case SizePolicyKind::train: {
            std::uniform_int_distribution<std::size_t> d(0, ckpt.train_metas.size() - 1);
            b.control = ckpt.train_metas[d(rng)];
            break;
        }
        }
        if (req.flip) b.control.flip = *req.flip;
        else if (req.size.kind != SizePolicyKind::train) b.control.flip = false;
    }
    return out;
}

Image row_to_image(const MatrixF& rows, Eigen::Index r, int channels, int size) {
    Image img(channels, size, size);
    std::copy(rows.row(r).data(), rows.row(r).data() + rows.cols(), img.data.begin());
    return img;
}

std::vector<Image> ddim_sample(const Checkpoint& ckpt, const SampleRequest& req, ForwardCounters* counters) {
    req.validate(ckpt.schedule.num_steps());
    const Model model = ckpt.model(req.use_ema);
    const auto bundles = request_bundles(ckpt, req);
    const MatrixF noise = initial_noise(req.count, model.config.pixels(), req.seed);
    GuidanceParams g = req.guidance;
    if (req.resolution_factor != 1.0) g.lambda = scale_guidance(g.lambda, req.resolution_factor);

    std::vector<Image> images;
    images.reserve(static_cast<std::size_t>(req.count));
    for (int lo = 0; lo < req.count; lo += req.chunk) {
        const int n = std::min(req.chunk, req.count - lo);
        const std::vector<ConditioningBundle> part(bundles.begin() + lo, bundles.begin() + lo + n);
        const MatrixF x = sample_bundles(model, ckpt.schedule, part, noise.middleRows(lo, n), req.num_steps, g, counters);
        for (int i = 0; i < n; ++i) images.push_back(row_to_image(x, i, model.config.channels, model.config.image_size));
    }
    return images;
}

Checkpoint transfer_init(const Checkpoint& ckpt, double new_scale, const TransferOptions& opts) {
    const double s = ckpt.schedule.scale;
    const double ratio = new_scale / s;
    const double k_round = std::round(ratio);
    if (!(new_scale > 0.0) || k_round < 1.0 || std::abs(ratio - k_round) > 1e-9) {
        throw ParameterError("transfer_init: new scale must be an integral multiple of the checkpoint scale");
    }
    const int k = static_cast<int>(k_round);
    Checkpoint out = ckpt;
    if (opts.reset_ema && out.ema) out.ema = out.params;
    if (k == 1) return out;

    out.config.model.image_size *= k;
    out.config.data.resolution *= k;
    out.grid = GridDescriptor{ckpt.grid.grid_size * k, ckpt.grid.scale * k,
                              opts.resample_posembed ? GridMode::resample : GridMode::extrapolate};
    if (opts.rescale_schedule) {
        out.schedule = rescale_schedule(ckpt.schedule, new_scale);
    }
    if (opts.scale_guidance) {
        out.config.guidance.lambda = scale_guidance(ckpt.config.guidance.lambda, static_cast<double>(k));
    }
    out.train_metas.clear();
    return out;
}

} // namespace dfkt
