#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dfkt/checkpoint.hpp"
#include "dfkt/errors.hpp"
#include "dfkt/guidance.hpp"
#include "dfkt/image.hpp"

namespace dfkt {

/// Adam with decoupled weight decay: p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps).
class AdamW {
public:
    AdamW(const ParamSet<float>& like, double lr, double beta1, double beta2, double eps,
          double weight_decay);

    void step(ParamSet<float>& params, const ParamSet<float>& grads);
    long steps_taken() const { return t_; }
    double lr() const { return lr_; }

private:
    ParamSet<float> m_, v_;
    double lr_, beta1_, beta2_, eps_, wd_;
    long t_ = 0;
};

/// Shadow <- shadow + (1 - decay) (params - shadow).
class Ema {
public:
    Ema(ParamSet<float> init, double decay) : shadow_(std::move(init)), decay_(decay) {}

    void update(const ParamSet<float>& params);
    const ParamSet<float>& shadow() const { return shadow_; }

private:
    ParamSet<float> shadow_;
    double decay_;
};

/// Fresh checkpoint: seeded weights, schedule and base positional grid.
Checkpoint initial_checkpoint(const RunConfig& cfg);

struct MetricRow {
    int step = 0;
    double loss = 0.0;
    double grad_norm = 0.0;
    double lr = 0.0;
};

struct TrainOutcome {
    Checkpoint checkpoint;
    std::vector<MetricRow> log;
    ForwardCounters counters; // per-sample condition usage over all steps
};

/// Raised when a step produces a non-finite loss or gradient. Carries the
/// last state whose loss was finite.
class TrainingAborted : public NumericError {
public:
    TrainingAborted(int step, Checkpoint last_good, const std::string& what);
    int step() const { return step_; }
    const Checkpoint& last_good() const { return last_good_; }

private:
    int step_;
    Checkpoint last_good_;
};

using StepCallback = std::function<void(const MetricRow&)>;

/// Runs `start.config.train.steps` optimizer steps from `start` on samples of
/// `start.config.data`. Deterministic given the configured seed.
TrainOutcome train(const Checkpoint& start, const StepCallback& on_step = {});

/// Appends `step,loss,grad_norm,lr` rows (header first when `header`).
std::string metrics_csv(const std::vector<MetricRow>& rows, bool header = true);

enum class SizePolicyKind { constant, uniform, train };

/// How (orig_h, orig_w) are chosen for each generated sample.
struct SizePolicy {
    SizePolicyKind kind = SizePolicyKind::constant;
    int h = 0; // constant; 0 -> model resolution
    int w = 0;
    int lo = 0; // uniform, inclusive
    int hi = 0;

    /// "constant:H,W", "uniform:LO,HI" or "train".
    static SizePolicy parse(const std::string& text);
};

struct SampleRequest {
    int count = 1;
    int num_steps = 250;
    GuidanceParams guidance{};
    double resolution_factor = 1.0; // lambda is passed through scale_guidance()
    SizePolicy size{};
    std::optional<bool> flip;       // unset: false, or logged flags under the train policy
    int class_id = -1;              // -1 cycles through classes
    std::string prompt;             // text mode; empty -> class captions
    std::uint64_t seed = 0;
    bool use_ema = true;
    int chunk = 128;                // samples per forward batch

    void validate(int num_train_steps) const;
};

/// Evenly spaced descending indices in [0, T), first entry T - 1.
std::vector<int> ddim_timesteps(int num_train_steps, int num_steps);

/// Deterministic DDIM (eta = 0) over `steps` (descending). Each step forms
/// x0_hat from eps_fn, clamps it to [-1, 1] and moves to the next index;
/// the last step returns x0_hat.
template <typename T>
MatrixT<T> ddim_loop(MatrixT<T> x, const NoiseSchedule& sched, const std::vector<int>& steps,
                     const std::function<MatrixT<T>(const MatrixT<T>&, int)>& eps_fn);

/// Double-CFG noise prediction. One model evaluation when lambda = beta = 1,
/// two when beta = 1, three otherwise.
MatrixF guided_eps(const Model& model, const NoiseSchedule& sched, const MatrixF& x, int t,
                   const std::vector<ConditioningBundle>& bundles, const GuidanceParams& g,
                   ForwardCounters* counters = nullptr);

/// Unit Gaussian start noise; row i depends only on (seed, i).
MatrixF initial_noise(int count, int pixels, std::uint64_t seed);

/// Samples one image per bundle from the given start noise; rows in [-1, 1].
MatrixF sample_bundles(const Model& model, const NoiseSchedule& sched,
                       const std::vector<ConditioningBundle>& bundles, const MatrixF& noise,
                       int num_steps, const GuidanceParams& g, ForwardCounters* counters = nullptr);

/// Conditions for a request (same order as the generated images).
std::vector<ConditioningBundle> request_bundles(const Checkpoint& ckpt, const SampleRequest& req);

std::vector<Image> ddim_sample(const Checkpoint& ckpt, const SampleRequest& req,
                               ForwardCounters* counters = nullptr);

Image row_to_image(const MatrixF& rows, Eigen::Index r, int channels, int size);

struct TransferOptions {
    bool rescale_schedule = true;
    bool resample_posembed = true; // false: extrapolate the grid instead
    bool scale_guidance = true;
    bool reset_ema = false;
};

/// Prepares a checkpoint for fine-tuning at resolution factor `new_scale`
/// (an integral multiple of the current one).
Checkpoint transfer_init(const Checkpoint& ckpt, double new_scale, const TransferOptions& opts = {});

} // namespace dfkt
