// Acceptance gate: one line per criterion, exit status 0 only if every
// selected criterion passes.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dfkt/checkpoint.hpp"
#include "dfkt/conditioning.hpp"
#include "dfkt/engine.hpp"
#include "dfkt/evaluation.hpp"
#include "dfkt/guidance.hpp"
#include "dfkt/noising.hpp"
#include "dfkt/posembed.hpp"
#include "dfkt/schedules.hpp"

using namespace dfkt;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;
};

// Collects failed checks while building a short summary line.
class Verdict {
public:
    void check(bool ok, const std::string& what) {
        if (!ok) {
            pass_ = false;
            failures_.push_back(what);
        }
    }
    void note(const std::string& s) { notes_.push_back(s); }

    Outcome finish() const {
        std::ostringstream os;
        for (std::size_t i = 0; i < notes_.size(); ++i) os << (i ? "; " : "") << notes_[i];
        if (!failures_.empty()) {
            os << (notes_.empty() ? "" : "; ") << "failed:";
            for (const auto& f : failures_) os << ' ' << f;
        }
        return {pass_, os.str()};
    }

private:
    bool pass_ = true;
    std::vector<std::string> notes_;
    std::vector<std::string> failures_;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

Outcome schedule_rescaling() {
    Verdict v;
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> ab(1e-4, 1.0 - 1e-4), scale(0.25, 8.0);
    double worst_snr = 0.0, worst_trip = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const double a = ab(rng), s = scale(rng), s2 = scale(rng);
        const double moved = rescale_alpha_bar(a, s, s2);
        worst_snr = std::max(worst_snr, rel_err(sigma_of(moved) / s2, sigma_of(a) / s));
        worst_trip = std::max(worst_trip, rel_err(rescale_alpha_bar(moved, s2, s), a));
    }
    v.check(worst_snr <= 1e-10, "snr identity");
    v.check(worst_trip <= 1e-12, "round trip");
    v.check(rescale_alpha_bar(0.5, 1.0, 2.0) == 0.2, "(0.5,1,2)->0.2");
    v.note("max snr rel err " + fmt("%.2e", worst_snr) + ", round trip " + fmt("%.2e", worst_trip));
    return v.finish();
}

Outcome guidance_reductions() {
    Verdict v;
    std::mt19937_64 rng(2);
    std::normal_distribution<double> n;
    bool bitwise = true;
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> a(64), b(64), c(64);
        for (std::size_t i = 0; i < a.size(); ++i) {
            a[i] = n(rng);
            b[i] = n(rng);
            c[i] = n(rng);
        }
        const double lambda = 0.5 + 4.0 * std::uniform_real_distribution<double>()(rng);
        const auto std_cfg = compose_double_cfg(a, b, c, {lambda, 1.0});
        const auto uncond = compose_double_cfg(a, b, c, {0.0, 0.7});
        const auto cond = compose_double_cfg(a, b, c, {1.0, 1.0});
        for (std::size_t i = 0; i < a.size(); ++i) {
            bitwise &= std_cfg[i] == lambda * a[i] + (1.0 - lambda) * c[i];
            bitwise &= uncond[i] == c[i];
            bitwise &= cond[i] == a[i];
        }
    }
    v.check(bitwise, "bitwise reductions");
    v.check(scale_guidance(1.5, 2.0) == 2.0, "scale_guidance(1.5,2)");
    v.note("scale_guidance(1.5, 2) = " + fmt("%.17g", scale_guidance(1.5, 2.0)));
    return v.finish();
}

Outcome control_profile() {
    Verdict v;
    const double alphas[] = {1.0, 2.0, 4.0, 8.0};
    bool bounds = true, monotone = true, ordered = true;
    for (double a : alphas) {
        const ControlWeightProfile p{ControlProfileKind::power_cosine, a};
        bounds &= control_weight(1.0, p) == 0.0 && control_weight(0.0, p) == 1.0;
        double prev = control_weight(0.0, p);
        for (int i = 1; i < 1000; ++i) {
            const double g = control_weight(i / 999.0, p);
            monotone &= g <= prev;
            prev = g;
        }
    }
    // Larger alpha delays activation: gamma is pointwise smaller.
    for (int i = 0; i < 1000; ++i) {
        const double t = i / 999.0;
        for (int k = 1; k < 4; ++k) {
            ordered &= control_weight(t, {ControlProfileKind::power_cosine, alphas[k]}) <=
                       control_weight(t, {ControlProfileKind::power_cosine, alphas[k - 1]});
        }
    }
    v.check(bounds, "boundary values");
    v.check(monotone, "monotone");
    v.check(ordered, "alpha ordering");
    return v.finish();
}

Outcome padding() {
    Verdict v;
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n;
    const int dim = 16, total = 77;
    MatrixD tokens(7, dim);
    for (Eigen::Index i = 0; i < tokens.size(); ++i) tokens.data()[i] = n(rng);

    v.check(noisy_replicate_pad<double>(tokens, 7, 0.02, rng) == tokens, "identity at L=T");
    const double m = std::ceil(77.0 / 7.0);
    const double beta = 0.02;
    double worst = 0.0;
    bool prefix = true;
    std::vector<double> sum(dim, 0.0), sum_sq(dim, 0.0);
    long count = 0;
    for (int draw = 0; draw < 10000; ++draw) {
        const MatrixD out = noisy_replicate_pad<double>(tokens, total, beta, rng);
        prefix &= out.topRows(7) == tokens;
        for (int r = 7; r < total; ++r) {
            for (int c = 0; c < dim; ++c) {
                const double e = out(r, c) - tokens(r % 7, c);
                sum[static_cast<std::size_t>(c)] += e;
                sum_sq[static_cast<std::size_t>(c)] += e * e;
            }
        }
        count += total - 7;
    }
    for (int c = 0; c < dim; ++c) {
        const double mean = tokens.col(c).mean();
        const double sigma_ch = std::sqrt((tokens.col(c).array() - mean).square().mean());
        const double mu = sum[static_cast<std::size_t>(c)] / count;
        const double sd = std::sqrt(sum_sq[static_cast<std::size_t>(c)] / count - mu * mu);
        worst = std::max(worst, rel_err(sd, beta * std::sqrt(m - 1.0) * sigma_ch));
    }
    v.check(prefix, "first-L preserved");
    v.check(worst <= 0.05, "noise std");
    v.note("max std rel err " + fmt("%.4f", worst));
    return v.finish();
}

Outcome positional_grid() {
    Verdict v;
    const std::pair<int, int> cases[] = {{8, 1}, {16, 2}, {32, 4}};
    std::vector<double> resampled_max;
    bool extrapolated = true;
    for (auto [g, s] : cases) {
        const auto r = build_grid({g, s, GridMode::resample});
        const auto e = build_grid({g, s, GridMode::extrapolate});
        resampled_max.push_back(*std::max_element(r.begin(), r.end()));
        extrapolated &= *std::max_element(e.begin(), e.end()) == g - 1;
    }
    v.check(resampled_max[0] == resampled_max[1] && resampled_max[1] == resampled_max[2], "resampled max constant");
    v.check(extrapolated, "extrapolated max = grid_size - 1");
    v.note("resampled max " + fmt("%g", resampled_max[0]));
    return v.finish();
}

ModelConfig tiny_model() {
    ModelConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.depth = 1;
    cfg.width = 16;
    cfg.heads = 2;
    cfg.cond_width = 16;
    cfg.embed_dim = 8;
    cfg.vocab = 4;
    cfg.mlp_ratio = 2;
    return cfg;
}

Outcome numerics() {
    Verdict v;
    const NoiseSchedule sched = quadratic_beta_schedule(1000);
    std::mt19937_64 rng(6);
    std::normal_distribution<double> n;

    double worst_equiv = 0.0;
    for (int t = 0; t < 1000; ++t) {
        std::vector<double> x0(32), eps(32);
        for (auto& x : x0) x = n(rng);
        for (auto& e : eps) e = n(rng);
        const auto a = ddpm_noising(x0, t, sched, eps);
        const auto b = edm_noising(x0, sched.sigma(t), eps);
        for (std::size_t i = 0; i < a.size(); ++i) worst_equiv = std::max(worst_equiv, std::abs(a[i] - b[i]) / std::max(1.0, std::abs(a[i])));
    }
    v.check(worst_equiv <= 1e-12, "ddpm/edm equivalence");

    const ModelConfig cfg = tiny_model();
    const GridDescriptor grid{cfg.grid_size(), 1, GridMode::resample};
    double worst_grad = 0.0;
    for (std::uint64_t seed : {11, 12, 13}) {
        std::mt19937_64 r(seed);
        ParamSet<double> params = init_params(cfg, seed).cast<double>();
        for (auto& t : params.tensors) {
            for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = 0.5 * n(r);
        }
        TrainBatch<double> batch;
        batch.x0 = MatrixD(3, cfg.pixels());
        batch.eps = MatrixD(3, cfg.pixels());
        for (Eigen::Index i = 0; i < batch.x0.size(); ++i) {
            batch.x0.data()[i] = 0.5 * n(r);
            batch.eps.data()[i] = n(r);
        }
        for (int b = 0; b < 3; ++b) {
            batch.t.push_back(std::uniform_int_distribution<int>(100, 900)(r));
            ConditioningBundle c;
            c.tokens = {b % cfg.vocab};
            c.control = {12 + b, 20 - b, b, 1, 0.8, b == 1};
            c.drop_control = b == 1;
            c.drop_semantic = b == 2;
            batch.bundles.push_back(c);
        }
        const auto report = loss_and_grads(cfg, params, batch, sched, grid);
        int checked = 0;
        while (checked < 50) {
            const auto ti = std::uniform_int_distribution<std::size_t>(0, params.size() - 1)(r);
            MatrixD& tensor = params.tensors[ti];
            const auto idx = std::uniform_int_distribution<Eigen::Index>(0, tensor.size() - 1)(r);
            const double orig = tensor.data()[idx], h = 1e-3;
            tensor.data()[idx] = orig + h;
            const double up = loss_only(cfg, params, batch, sched, grid);
            tensor.data()[idx] = orig - h;
            const double down = loss_only(cfg, params, batch, sched, grid);
            tensor.data()[idx] = orig;
            const double numeric = (up - down) / (2 * h), analytic = report.grads.tensors[ti].data()[idx];
            const double scale = std::max(std::abs(numeric), std::abs(analytic));
            if (scale < 1e-8) continue;
            worst_grad = std::max(worst_grad, std::abs(numeric - analytic) / scale);
            ++checked;
        }
    }
    v.check(worst_grad < 1e-3, "gradient check");

    MatrixD x0(4, 48), eps(4, 48);
    for (Eigen::Index i = 0; i < x0.size(); ++i) {
        x0.data()[i] = std::clamp(0.4 * n(rng), -0.95, 0.95);
        eps.data()[i] = n(rng);
    }
    const double ab = sched.alpha_bars.back();
    const MatrixD xT = std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
    const MatrixD back = ddim_loop<double>(xT, sched, ddim_timesteps(1000, 1000), [&](const MatrixD&, int) { return eps; });
    const double round_trip = (back - x0).cwiseAbs().maxCoeff();
    v.check(round_trip < 1e-12, "ddim round trip");
    v.note("equivalence " + fmt("%.1e", worst_equiv) + ", grad rel err " + fmt("%.1e", worst_grad) +
           ", ddim round trip " + fmt("%.1e", round_trip));
    return v.finish();
}

// Small 16 px recipe shared by the behavioural criteria.
RunConfig recipe(int width, int steps, double lr, std::uint64_t seed) {
    RunConfig cfg;
    cfg.model.width = width;
    cfg.model.cond_width = width;
    cfg.model.depth = 3;
    cfg.model.heads = 4;
    cfg.train.steps = steps;
    cfg.train.lr = lr;
    cfg.train.ema_decay = 0.995;
    cfg.train.loss_weight = LossWeighting{LossWeighting::Kind::unit};
    cfg.train.seed = seed;
    return cfg;
}

Checkpoint fit(const RunConfig& cfg) { return train(initial_checkpoint(cfg)).checkpoint; }

struct Settings {
    int c7_width = 96, c7_steps = 8000;
    double c7_lr = 2e-3;
    int small_width = 64, small_steps = 5000;
    double small_lr = 5e-3;
    int base_steps = 4000, finetune_steps = 1000;
    double finetune_lr = 2e-3;
    std::vector<std::uint64_t> seeds{1, 2, 3};
};

Outcome end_to_end(const Settings& s) {
    Verdict v;
    const RunConfig cfg = recipe(s.c7_width, s.c7_steps, s.c7_lr, 7);
    const Checkpoint ck = fit(cfg);
    EvalOptions acc_opts;
    acc_opts.count = 256;
    acc_opts.guidance = GuidanceParams{1.5, 1.0};
    acc_opts.seed = 70;
    const OracleScore acc = evaluate_class_accuracy(ck, acc_opts);

    EvalOptions fd_opts = acc_opts;
    fd_opts.count = 2048;
    fd_opts.seed = 71;
    const double fd = evaluate_frechet(ck, fd_opts);
    const double fd_noise = noise_frechet(cfg.data, cfg.model.channels, fd_opts);
    v.check(acc.accuracy() >= 0.8, "class accuracy");
    v.check(fd * 10.0 <= fd_noise, "frechet ratio");
    v.note("class acc " + fmt("%.3f", acc.accuracy()) + " (low confidence " + std::to_string(acc.flagged) +
           "), fd " + fmt("%.4f", fd) + " vs noise " + fmt("%.3f", fd_noise) + " (ratio " +
           fmt("%.1f", fd_noise / std::max(fd, 1e-12)) + ")");
    return v.finish();
}

Outcome flip_conditioning(const Settings& s) {
    Verdict v;
    EvalOptions opts;
    opts.count = 256;
    opts.guidance = GuidanceParams{1.5, 1.0};
    for (std::uint64_t seed : s.seeds) {
        RunConfig with = recipe(s.small_width, s.small_steps, s.small_lr, seed);
        RunConfig without = with;
        without.model.use_flip = false;
        opts.seed = 80 + seed;
        const OracleScore a = evaluate_flip_accuracy(fit(with), opts);
        const OracleScore b = evaluate_flip_accuracy(fit(without), opts);
        const std::string tag = "seed " + std::to_string(seed);
        v.check(a.decided_accuracy() >= 0.9, tag + " with-flip");
        v.check(b.decided_accuracy() <= 0.65, tag + " without-flip");
        v.check(a.decided_accuracy() > b.decided_accuracy(), tag + " gap sign");
        // Agreement over decided samples is only meaningful if most are decided.
        v.check(a.flagged <= opts.count / 4, tag + " with-flip undecided");
        v.note(tag + ": " + fmt("%.3f", a.decided_accuracy()) + " (undecided " + std::to_string(a.flagged) + ") vs " +
               fmt("%.3f", b.decided_accuracy()) + " (undecided " + std::to_string(b.flagged) + ")");
    }
    return v.finish();
}

Outcome disentanglement(const Settings& s) {
    Verdict v;
    EvalOptions opts;
    for (std::uint64_t seed : s.seeds) {
        RunConfig cosine = recipe(s.small_width, s.small_steps, s.small_lr, seed);
        RunConfig uniform = cosine;
        uniform.model.control_profile.kind = ControlProfileKind::uniform;
        opts.seed = 90 + seed;
        const double dc = evaluate_diversity(fit(cosine), opts);
        const double du = evaluate_diversity(fit(uniform), opts);
        const std::string tag = "seed " + std::to_string(seed);
        v.check(dc < du, tag);
        v.note(tag + ": cosine " + fmt("%.5f", dc) + " vs uniform " + fmt("%.5f", du));
    }
    return v.finish();
}

Outcome resolution_transfer(const Settings& s) {
    Verdict v;
    EvalOptions opts;
    opts.count = 512;
    opts.guidance = GuidanceParams{1.0, 1.0};
    for (std::uint64_t seed : s.seeds) {
        const Checkpoint base = fit(recipe(s.small_width, s.base_steps, s.small_lr, seed));
        auto finetune = [&](Checkpoint start) {
            start.config.train.steps = s.finetune_steps;
            start.config.train.lr = s.finetune_lr;
            start.config.train.seed = seed + 100;
            return train(start).checkpoint;
        };
        const Checkpoint full = finetune(transfer_init(base, 2.0));
        TransferOptions no_rescale;
        no_rescale.rescale_schedule = false;
        const Checkpoint plain = finetune(transfer_init(base, 2.0, no_rescale));
        RunConfig scratch_cfg = recipe(s.small_width, s.finetune_steps, s.small_lr, seed + 100);
        scratch_cfg.model.image_size = 32;
        scratch_cfg.data.resolution = 32;
        const Checkpoint scratch = fit(scratch_cfg);

        opts.seed = 100 + seed;
        const double f_full = evaluate_frechet(full, opts);
        const double f_plain = evaluate_frechet(plain, opts);
        const double f_scratch = evaluate_frechet(scratch, opts);
        const std::string tag = "seed " + std::to_string(seed);
        v.check(f_full < f_scratch, tag + " vs scratch");
        v.check(f_full < f_plain, tag + " vs no-rescale");
        v.note(tag + ": transfer " + fmt("%.4f", f_full) + ", no-rescale " + fmt("%.4f", f_plain) + ", scratch " +
               fmt("%.4f", f_scratch));
    }
    return v.finish();
}

Outcome checkpoint_determinism() {
    Verdict v;
    RunConfig cfg;
    cfg.model = tiny_model();
    cfg.data.resolution = 8;
    cfg.data.classes = 4;
    cfg.train.steps = 5;
    cfg.train.batch = 4;
    cfg.train.dataset_size = 32;
    cfg.train.seed = 3;
    const Checkpoint a = fit(cfg);
    const Checkpoint b = fit(cfg);
    const std::string bytes = encode_checkpoint(a);
    v.check(bytes == encode_checkpoint(b), "seeded training");
    const Checkpoint back = decode_checkpoint(bytes);
    v.check(back == a && encode_checkpoint(back) == bytes, "save/load identity");

    SampleRequest req;
    req.count = 6;
    req.num_steps = 20;
    req.guidance = {1.0, 1.0};
    req.seed = 5;
    req.size = SizePolicy::parse("train");
    v.check(ddim_sample(a, req) == ddim_sample(back, req), "seeded sampling");
    req.guidance = {1.5, 0.5};
    v.check(ddim_sample(a, req) == ddim_sample(a, req), "seeded guided sampling");
    return v.finish();
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    std::vector<int> only;
    Settings s;
    app.add_option("--only", only, "Criterion numbers to run (default all)")->check(CLI::Range(1, 11));
    CLI11_PARSE(app, argc, argv);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"schedule rescaling", schedule_rescaling},
        {"guidance reductions", guidance_reductions},
        {"control weight profile", control_profile},
        {"text padding", padding},
        {"positional grid", positional_grid},
        {"numerics", numerics},
        {"end-to-end class conditional", [&] { return end_to_end(s); }},
        {"flip conditioning", [&] { return flip_conditioning(s); }},
        {"size disentanglement", [&] { return disentanglement(s); }},
        {"resolution transfer", [&] { return resolution_transfer(s); }},
        {"checkpoint and determinism", checkpoint_determinism},
    };
    bool all = true;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome out;
        try {
            out = criteria[i].second();
        } catch (const std::exception& e) {
            out = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::printf("criterion %2d %-30s %s  [%.1fs] %s\n", id, criteria[i].first.c_str(), out.pass ? "PASS" : "FAIL",
                    secs, out.detail.c_str());
        std::fflush(stdout);
        all &= out.pass;
    }
    return all ? 0 : 1;
}
