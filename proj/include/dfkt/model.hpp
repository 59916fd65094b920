#pragma once

#include <cstdint>
#include <vector>

#include "dfkt/conditioning.hpp"
#include "dfkt/posembed.hpp"
#include "dfkt/schedules.hpp"
#include "dfkt/tensor.hpp"

namespace dfkt {

enum class SemanticMode {
    class_label, // one token per sample from a class embedding table
    text,        // hashed word tokens, replicate-padded to `tokens`
};

/// Shape of the joint-attention denoising transformer.
struct ModelConfig {
    int image_size = 16;
    int patch_size = 4;
    int channels = 3;
    int depth = 4;
    int width = 128;
    int heads = 4;
    int tokens = 1;        // semantic sequence length after padding
    int cond_width = 128;  // width of the timestep + control vector
    int vocab = 8;         // class count, or hash buckets in text mode
    int embed_dim = 32;    // sinusoid width per scalar input
    int mlp_ratio = 4;
    SemanticMode mode = SemanticMode::class_label;
    double text_pad_noise = 0.02; // beta_txt
    bool use_control = true;
    bool use_flip = true;
    ControlWeightProfile control_profile{};

    void validate() const;
    int grid_size() const { return image_size / patch_size; }
    int num_patches() const { return grid_size() * grid_size(); }
    int patch_dim() const { return channels * patch_size * patch_size; }
    int pixels() const { return channels * image_size * image_size; }
    ControlEmbedder control_embedder() const { return {embed_dim, cond_width, use_flip}; }
};

std::vector<TensorSpec> model_layout(const ModelConfig& cfg);

/// Seeded initialization. Modulation projections, the last layers of both
/// control perceptrons and the null embeddings start at zero; the rest is
/// drawn from N(0, 1/fan_in) (biases zero).
ParamSet<float> init_params(const ModelConfig& cfg, std::uint64_t seed);

/// Model parameters together with the configuration and positional grid.
struct Model {
    ModelConfig config;
    GridDescriptor grid;
    ParamSet<float> params;
};

Model make_model(const ModelConfig& cfg, std::uint64_t seed, GridMode mode = GridMode::resample);

/// Swaps the positional grid for a new resolution. Parameters are untouched
/// because positional embeddings are regenerated from the grid.
Model resample_for_resolution(const Model& model, const GridDescriptor& new_grid);

template <typename T>
struct BlockCache;

/// Intermediates kept by forward() for the backward pass.
template <typename T>
struct ForwardCache {
    int batch = 0;
    int seq = 0;
    MatrixT<T> patches;
    std::vector<MatrixT<T>> sem_src;
    std::vector<MatrixT<T>> sem_noise;
    MatrixT<T> t_feat, t_pre, t_act;
    ControlEmbedCache<T> ctl;
    MatrixT<T> cond, cond_act;
    std::vector<BlockCache<T>> blocks;
    MatrixT<T> lnf, af, fmod;
    std::vector<T> lnf_inv;

    /// RMS-normalized queries / keys entering attention in block `i`,
    /// (batch * seq) x width, heads side by side.
    const MatrixT<T>& normalized_queries(int i) const;
    const MatrixT<T>& normalized_keys(int i) const;

    ForwardCache();
    ~ForwardCache();
    ForwardCache(ForwardCache&&) noexcept;
    ForwardCache& operator=(ForwardCache&&) noexcept;
};

/// Counts of conditional / null-condition evaluations, per sample.
struct ForwardCounters {
    long samples = 0;
    long null_semantic = 0;
    long null_control = 0;
};

/// Noise prediction for a batch. `x_t` is (batch x C*H*W) in CHW order and
/// `t` holds step indices into `sched`.
template <typename T>
MatrixT<T> forward(const ModelConfig& cfg, const ParamSet<T>& params, const MatrixT<T>& x_t,
                   const std::vector<int>& t, const std::vector<ConditioningBundle>& bundles,
                   const NoiseSchedule& sched, const GridDescriptor& grid,
                   ForwardCache<T>* cache = nullptr, ForwardCounters* counters = nullptr);

/// Backpropagates d(loss)/d(eps_hat) through a cached forward pass.
template <typename T>
void backward(const ModelConfig& cfg, const ParamSet<T>& params, const ForwardCache<T>& cache,
              const std::vector<ConditioningBundle>& bundles, const MatrixT<T>& d_out,
              ParamSet<T>& grads);

template <typename T>
struct GradientReport {
    double loss = 0.0;
    ParamSet<T> grads;
};

/// One training minibatch: clean images, steps, noise draws and conditions.
template <typename T>
struct TrainBatch {
    MatrixT<T> x0;
    std::vector<int> t;
    MatrixT<T> eps;
    std::vector<ConditioningBundle> bundles;
};

/// Per-sample loss weight w(sigma_t).
struct LossWeighting {
    enum class Kind {
        inverse_sigma_sq, // sigma^-2
        unit,             // 1
        capped,           // min(sigma^-2, cap)
    };
    Kind kind = Kind::inverse_sigma_sq;
    double cap = 5.0;

    double operator()(double sigma) const;
};

/// loss = mean_b w(sigma_t) * ||eps_hat - eps||^2 / numel on EDM-noised inputs,
/// with w = sigma^-2 by default.
template <typename T>
GradientReport<T> loss_and_grads(const ModelConfig& cfg, const ParamSet<T>& params,
                                 const TrainBatch<T>& batch, const NoiseSchedule& sched,
                                 const GridDescriptor& grid, const LossWeighting& weighting = {});

/// Loss only, same definition as loss_and_grads().
template <typename T>
double loss_only(const ModelConfig& cfg, const ParamSet<T>& params, const TrainBatch<T>& batch,
                 const NoiseSchedule& sched, const GridDescriptor& grid,
                 const LossWeighting& weighting = {});

/// Image batch <-> token patches, tokens row-major over the patch grid and
/// each patch flattened as (channel, row, col).
template <typename T>
MatrixT<T> patchify(const MatrixT<T>& images, int channels, int image_size, int patch_size);
template <typename T>
MatrixT<T> unpatchify(const MatrixT<T>& patches, int batch, int channels, int image_size,
                      int patch_size);

} // namespace dfkt
