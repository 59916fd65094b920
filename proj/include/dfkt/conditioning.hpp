#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "dfkt/schedules.hpp"
#include "dfkt/tensor.hpp"

namespace dfkt {

/// Augmentation record of one training image, all lengths in source pixels.
struct ControlMeta {
    int orig_h = 16;
    int orig_w = 16;
    int crop_top = 0;
    int crop_left = 0;
    double crop_scale = 1.0; // area fraction of the crop
    bool flip = false;

    void validate() const;
    bool operator==(const ControlMeta&) const = default;
};

/// Semantic + control condition of one sample.
///
/// `tokens` holds a single class id in class mode, or word ids in text mode
/// (padded to the model's token count inside the forward pass, with padding
/// noise drawn from `pad_seed`).
struct ConditioningBundle {
    std::vector<int> tokens;
    ControlMeta control;
    bool drop_semantic = false;
    bool drop_control = false;
    std::uint64_t pad_seed = 0;

    bool operator==(const ConditioningBundle&) const = default;
};

/// [sin(v w_0), cos(v w_0), sin(v w_1), ...] with w_k = 10000^(-2k/dim).
std::vector<double> sincos_embed(double value, int dim);

/// Writes sincos_embed(value, dim) into `out[0 .. dim)`.
template <typename T>
void sincos_embed_into(double value, int dim, T* out);

/// Layout of the two control-embedding perceptrons E_h and E_l.
///
/// E_h consumes (crop_top, crop_left, flip), E_l consumes (orig_h, orig_w);
/// every scalar is expanded with sincos_embed(., embed_dim) and the
/// concatenation feeds a Linear -> SiLU -> Linear stack of width `width`.
struct ControlEmbedder {
    int embed_dim = 32;
    int width = 128;
    bool use_flip = true; // false feeds a constant 0 in place of the flip flag

    static constexpr int high_inputs = 3;
    static constexpr int low_inputs = 2;

    std::vector<TensorSpec> layout() const;
};

template <typename T>
struct ControlEmbedCache {
    MatrixT<T> feat_h, pre_h, act_h;
    MatrixT<T> feat_l, pre_l, act_l, out_l;
    std::vector<T> gamma;
};

/// c_emb = E_h(phi_h) + gamma(t_norm) * E_l(phi_l), one row per meta.
template <typename T>
MatrixT<T> embed_control(const std::vector<ControlMeta>& metas, const std::vector<double>& t_norm,
                         const ParamSet<T>& params, const ControlEmbedder& embedder,
                         const ControlWeightProfile& profile, ControlEmbedCache<T>* cache = nullptr);

template <typename T>
void embed_control_backward(const ControlEmbedCache<T>& cache, const MatrixT<T>& d_out,
                            const ParamSet<T>& params, ParamSet<T>& grads);

/// Pads L token rows to `total` rows with cyclic copies perturbed by
/// beta_txt * sqrt(m - 1) * sigma_ch * z, m = ceil(total / L), sigma_ch the
/// per-channel (population) std of the original rows. `z` holds the
/// (total - L) x D standard-normal draws.
template <typename T>
MatrixT<T> replicate_pad(const MatrixT<T>& tokens, int total, double beta_txt, const MatrixT<T>& z);

/// Gradient of replicate_pad w.r.t. `tokens`, including the sigma_ch path.
template <typename T>
MatrixT<T> replicate_pad_backward(const MatrixT<T>& tokens, int total, double beta_txt,
                                  const MatrixT<T>& z, const MatrixT<T>& d_out);

template <typename T>
MatrixT<T> noisy_replicate_pad(const MatrixT<T>& tokens, int total, double beta_txt,
                               std::mt19937_64& rng);

/// Standard-normal draws used for padding a sequence of L tokens.
template <typename T>
MatrixT<T> padding_noise(int num_tokens, int total, int dim, std::uint64_t seed);

/// Sets each drop flag independently with the given probability.
ConditioningBundle drop_conditions(ConditioningBundle bundle, double p_sem, double p_ctl,
                                   std::mt19937_64& rng);

/// Lowercased whitespace-split words hashed (FNV-1a) into [0, vocab).
std::vector<int> tokenize(std::string_view prompt, int vocab, int max_tokens);

} // namespace dfkt
