#include "dfkt/evaluation.hpp"

#include "dfkt/engine.hpp"

namespace dfkt {

namespace {

SampleRequest base_request(const Checkpoint& ckpt, const EvalOptions& opts, int count, std::uint64_t seed) {
    SampleRequest req;
    req.count = count;
    req.num_steps = opts.num_steps;
    req.guidance = opts.guidance.value_or(ckpt.config.guidance);
    req.seed = seed;
    req.use_ema = opts.use_ema;
    if (!ckpt.train_metas.empty()) req.size.kind = SizePolicyKind::train;
    return req;
}

FeatureExtractor extractor_for(int pixels, const EvalOptions& opts) {
    return FeatureExtractor(pixels, derive_seed(opts.seed, 0xFEA7));
}

std::vector<Image> reference_images(const DataConfig& data, const EvalOptions& opts) {
    return real_images(data, opts.count, derive_seed(opts.seed, 0x5EA1));
}

} // namespace

OracleScore evaluate_class_accuracy(const Checkpoint& ckpt, const EvalOptions& opts) {
    const SampleRequest req = base_request(ckpt, opts, opts.count, derive_seed(opts.seed, 1));
    const std::vector<Image> images = ddim_sample(ckpt, req);
    std::vector<int> labels;
    for (int i = 0; i < opts.count; ++i) labels.push_back(i % ckpt.config.data.classes);
    return class_accuracy(images, labels, TemplateBank::build(ckpt.config.data.classes, ckpt.config.model.image_size));
}

OracleScore evaluate_flip_accuracy(const Checkpoint& ckpt, const EvalOptions& opts) {
    std::vector<Image> images;
    std::vector<bool> flips;
    const int half = opts.count / 2;
    for (int f = 0; f < 2; ++f) {
        const int n = f == 0 ? half : opts.count - half;
        if (n == 0) continue;
        SampleRequest req = base_request(ckpt, opts, n, derive_seed(opts.seed, 2 + static_cast<std::uint64_t>(f)));
        req.flip = f == 1;
        for (auto& img : ddim_sample(ckpt, req)) {
            images.push_back(std::move(img));
            flips.push_back(f == 1);
        }
    }
    return flip_accuracy(images, flips);
}

double evaluate_frechet(const Checkpoint& ckpt, const EvalOptions& opts) {
    const SampleRequest req = base_request(ckpt, opts, opts.count, derive_seed(opts.seed, 4));
    const std::vector<Image> generated = ddim_sample(ckpt, req);
    const FeatureExtractor fe = extractor_for(ckpt.config.model.pixels(), opts);
    return image_frechet_distance(reference_images(ckpt.config.data, opts), generated, fe);
}

double noise_frechet(const DataConfig& data, int channels, const EvalOptions& opts) {
    const FeatureExtractor fe = extractor_for(channels * data.resolution * data.resolution, opts);
    return image_frechet_distance(reference_images(data, opts),
                                  uniform_noise_images(opts.count, channels, data.resolution, derive_seed(opts.seed, 5)),
                                  fe);
}

double evaluate_diversity(const Checkpoint& ckpt, const EvalOptions& opts, bool high_res) {
    std::vector<ConditioningBundle> conds;
    const int per_class = 4;
    for (int k = 0; k < ckpt.config.data.classes; ++k) {
        for (int j = 0; j < per_class; ++j) {
            ConditioningBundle c;
            if (ckpt.config.model.mode == SemanticMode::class_label) {
                c.tokens = {k};
            } else {
                ShapeSpec spec;
                spec.class_id = k;
                c.tokens = tokenize(caption(spec), ckpt.config.model.vocab, ckpt.config.model.tokens);
            }
            c.pad_seed = derive_seed(opts.seed, static_cast<std::uint64_t>(k * per_class + j));
            conds.push_back(std::move(c));
        }
    }
    DiversityOptions d;
    d.num_steps = opts.num_steps;
    d.guidance = opts.guidance.value_or(GuidanceParams{1.0, 1.0});
    d.use_ema = opts.use_ema;
    return diversity_score(ckpt, conds, high_res ? diversity_sizes_high_res() : diversity_sizes(),
                           derive_seed(opts.seed, 6), d);
}

} // namespace dfkt
