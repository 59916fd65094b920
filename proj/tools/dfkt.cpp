#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dfkt/checkpoint.hpp"
#include "dfkt/engine.hpp"
#include "dfkt/evaluation.hpp"
#include "dfkt/image.hpp"
#include "dfkt/schedules.hpp"

namespace fs = std::filesystem;
using namespace dfkt;

namespace {

enum Exit { ok = 0, failure = 1, usage = 2, checksum = 3, numeric = 4 };

// Appends to an existing file, writing the header only for a new or empty one.
std::ofstream open_append(const fs::path& path, const std::string& header) {
    const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::app);
    if (!out) throw std::runtime_error("cannot open " + path.string());
    if (fresh) out << header << '\n';
    return out;
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& sets) {
    ConfigMap map;
    for (const auto& kv : sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ParameterError("--set expects key=value, got '" + kv + "'");
        map[kv.substr(0, eq)] = kv.substr(eq + 1);
    }
    cfg = apply_config(map, cfg);
}

struct TrainArgs {
    std::string config;
    std::string out;
    std::string log;
    std::optional<std::uint64_t> seed;
    std::optional<int> steps;
    std::optional<int> resolution;
    std::optional<std::string> crop;
    std::vector<std::string> sets;
};

struct FinetuneArgs {
    std::string from;
    std::string out;
    std::string log;
    int resolution = 0;
    bool rescale_schedule = true;
    bool resample_posembed = true;
    bool scale_guidance = true;
    bool reset_ema = false;
    std::optional<std::uint64_t> seed;
    std::optional<int> steps;
    std::vector<std::string> sets;
};

struct SampleArgs {
    std::string ckpt;
    std::string out;
    int count = 16;
    int steps = 250;
    std::optional<double> lambda;
    std::optional<double> beta;
    std::optional<std::string> size_policy; // unset: model resolution
    std::optional<int> flip;
    std::optional<int> class_id;
    std::optional<std::string> prompt;
    std::uint64_t seed = 0;
    bool raw = false;
    int columns = 8;
};

struct EvalArgs {
    std::string ckpt;
    std::vector<std::string> metrics;
    std::string out;
    int count = 256;
    int steps = 50;
    std::optional<double> lambda;
    std::optional<double> beta;
    std::uint64_t seed = 0;
    bool raw = false;
};

struct ScheduleArgs {
    int T = 1000;
    double scale = 1.0;
    std::optional<double> rescale_to;
    std::string profile = "cosine";
    double alpha = 8.0;
    std::string emit;
};

int run_training(Checkpoint start, const std::string& out, std::string log) {
    if (log.empty()) log = out + ".metrics.csv";
    std::ofstream metrics = open_append(log, "step,loss,grad_norm,lr");
    const int total = start.config.train.steps;
    try {
        const TrainOutcome result = train(start, [&](const MetricRow& row) {
            metrics << metrics_csv({row}, false);
            if ((row.step + 1) % 500 == 0 || row.step + 1 == total) {
                std::fprintf(stderr, "step %d/%d loss %.5f\n", row.step + 1, total, row.loss);
            }
        });
        metrics.flush();
        save_checkpoint(out, result.checkpoint);
    } catch (const TrainingAborted& e) {
        metrics.flush();
        const std::string rescue = out + ".last_good";
        save_checkpoint(rescue, e.last_good());
        std::fprintf(stderr, "error: %s (step %d); last good state written to %s\n", e.what(), e.step(),
                     rescue.c_str());
        return numeric;
    }
    std::printf("%s\n", out.c_str());
    return ok;
}

int cmd_train(const TrainArgs& a) {
    RunConfig cfg;
    if (!a.config.empty()) cfg = apply_config(load_config_file(a.config));
    apply_overrides(cfg, a.sets);
    if (a.seed) cfg.train.seed = *a.seed;
    if (a.steps) cfg.train.steps = *a.steps;
    if (a.resolution) {
        cfg.model.image_size = *a.resolution;
        cfg.data.resolution = *a.resolution;
    }
    if (a.crop) cfg.data.strategy = CropStrategy::parse(*a.crop);
    cfg.validate();
    return run_training(initial_checkpoint(cfg), a.out, a.log);
}

int cmd_finetune(const FinetuneArgs& a) {
    const Checkpoint base = load_checkpoint(a.from);
    const int current = base.config.model.image_size;
    if (a.resolution <= 0 || a.resolution % current != 0) {
        throw ParameterError("finetune: --resolution must be a positive multiple of " + std::to_string(current));
    }
    TransferOptions opts;
    opts.rescale_schedule = a.rescale_schedule;
    opts.resample_posembed = a.resample_posembed;
    opts.scale_guidance = a.scale_guidance;
    opts.reset_ema = a.reset_ema;
    Checkpoint start = transfer_init(base, base.schedule.scale * (a.resolution / current), opts);
    apply_overrides(start.config, a.sets);
    if (a.seed) start.config.train.seed = *a.seed;
    if (a.steps) start.config.train.steps = *a.steps;
    start.config.validate();
    return run_training(std::move(start), a.out, a.log);
}

int cmd_sample(const SampleArgs& a) {
    const Checkpoint ck = load_checkpoint(a.ckpt);
    SampleRequest req;
    req.count = a.count;
    req.num_steps = a.steps;
    req.guidance = ck.config.guidance;
    if (a.lambda) req.guidance.lambda = *a.lambda;
    if (a.beta) req.guidance.beta = *a.beta;
    if (a.size_policy) req.size = SizePolicy::parse(*a.size_policy);
    if (a.flip) req.flip = *a.flip != 0;
    if (a.class_id) req.class_id = *a.class_id;
    if (a.prompt) req.prompt = *a.prompt;
    req.seed = a.seed;
    req.use_ema = !a.raw;
    const std::vector<Image> images = ddim_sample(ck, req);

    fs::create_directories(a.out);
    char name[32];
    for (std::size_t i = 0; i < images.size(); ++i) {
        std::snprintf(name, sizeof name, "sample_%04zu.ppm", i);
        write_pnm(fs::path(a.out) / name, images[i]);
    }
    write_pnm(fs::path(a.out) / "grid.ppm", make_grid(images, a.columns));
    std::printf("%zu images in %s\n", images.size(), a.out.c_str());
    return ok;
}

int cmd_eval(const EvalArgs& a) {
    const Checkpoint ck = load_checkpoint(a.ckpt);
    EvalOptions opts;
    opts.count = a.count;
    opts.num_steps = a.steps;
    opts.seed = a.seed;
    opts.use_ema = !a.raw;
    if (a.lambda || a.beta) {
        GuidanceParams g = ck.config.guidance;
        if (a.lambda) g.lambda = *a.lambda;
        if (a.beta) g.beta = *a.beta;
        opts.guidance = g;
    }
    const std::string hash = config_hash(to_config_map(ck.config));

    std::vector<std::pair<std::string, double>> rows;
    for (const auto& m : a.metrics) {
        if (m == "fid") {
            rows.emplace_back("fid", evaluate_frechet(ck, opts));
        } else if (m == "diversity") {
            rows.emplace_back("diversity", evaluate_diversity(ck, opts, false));
            rows.emplace_back("diversity_hr", evaluate_diversity(ck, opts, true));
        } else if (m == "flip-acc") {
            const OracleScore s = evaluate_flip_accuracy(ck, opts);
            rows.emplace_back("flip_acc", s.accuracy());
            rows.emplace_back("flip_undecided", s.flagged);
        } else if (m == "class-acc") {
            const OracleScore s = evaluate_class_accuracy(ck, opts);
            rows.emplace_back("class_acc", s.accuracy());
            rows.emplace_back("class_low_confidence", s.flagged);
        }
    }
    std::optional<std::ofstream> file;
    if (!a.out.empty()) file = open_append(a.out, "metric,value,config_hash,seed");
    for (const auto& [metric, value] : rows) {
        const std::string line = eval_csv_row(metric, value, hash, a.seed);
        std::printf("%s\n", line.c_str());
        if (file) *file << line << '\n';
    }
    return ok;
}

int cmd_schedule(const ScheduleArgs& a) {
    NoiseSchedule sched = quadratic_beta_schedule(a.T);
    if (a.scale != 1.0) sched = rescale_schedule(sched, a.scale);
    std::optional<NoiseSchedule> moved;
    if (a.rescale_to) moved = rescale_schedule(sched, *a.rescale_to);
    ControlWeightProfile profile;
    profile.kind = a.profile == "uniform" ? ControlProfileKind::uniform : ControlProfileKind::power_cosine;
    profile.alpha = a.alpha;

    std::ofstream file;
    if (!a.emit.empty()) {
        file.open(a.emit);
        if (!file) throw std::runtime_error("cannot open " + a.emit);
    }
    std::ostream& out = a.emit.empty() ? std::cout : file;
    out << "t,beta,alpha_bar,sigma,gamma_c";
    if (moved) out << ",beta_rescaled,alpha_bar_rescaled,sigma_rescaled";
    out << '\n';
    char buf[256];
    for (int t = 0; t < a.T; ++t) {
        const auto i = static_cast<std::size_t>(t);
        std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g", t, sched.betas[i], sched.alpha_bars[i],
                      sched.sigma(t), control_weight(static_cast<double>(t) / a.T, profile));
        out << buf;
        if (moved) {
            std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%.17g", moved->betas[i], moved->alpha_bars[i],
                          moved->sigma(t));
            out << buf;
        }
        out << '\n';
    }
    return ok;
}

} // namespace

int main(int argc, char** argv) {
    // Single-threaded build: DFKT_THREADS is accepted but every command runs on one worker.
    if (const char* threads = std::getenv("DFKT_THREADS")) {
        char* end = nullptr;
        const long n = std::strtol(threads, &end, 10);
        if (*threads == '\0' || *end != '\0' || n < 0) {
            std::fprintf(stderr, "error: DFKT_THREADS must be a non-negative integer\n");
            return usage;
        }
    }

    CLI::App app{"Diffusion transformer toolkit for procedural shape images"};
    app.require_subcommand(1);

    TrainArgs ta;
    auto* train_cmd = app.add_subcommand("train", "Train from scratch");
    train_cmd->add_option("--config", ta.config, "key = value config file")->check(CLI::ExistingFile);
    train_cmd->add_option("--out", ta.out, "Checkpoint path")->required();
    train_cmd->add_option("--log", ta.log, "Metrics CSV (default <out>.metrics.csv)");
    train_cmd->add_option("--seed", ta.seed);
    train_cmd->add_option("--steps", ta.steps)->check(CLI::NonNegativeNumber);
    train_cmd->add_option("--resolution", ta.resolution)->check(CLI::PositiveNumber);
    train_cmd->add_option("--crop-strategy", ta.crop)->check(CLI::IsMember({"global", "local", "mix"}));
    train_cmd->add_option("--set", ta.sets, "Config override key=value");

    FinetuneArgs fa;
    auto* ft_cmd = app.add_subcommand("finetune", "Transfer a checkpoint to a higher resolution and train");
    ft_cmd->add_option("--from", fa.from)->required()->check(CLI::ExistingFile);
    ft_cmd->add_option("--out", fa.out)->required();
    ft_cmd->add_option("--log", fa.log);
    ft_cmd->add_option("--resolution", fa.resolution)->required();
    ft_cmd->add_option("--rescale-schedule", fa.rescale_schedule);
    ft_cmd->add_option("--resample-posembed", fa.resample_posembed);
    ft_cmd->add_option("--scale-guidance", fa.scale_guidance);
    ft_cmd->add_flag("--reset-ema", fa.reset_ema);
    ft_cmd->add_option("--seed", fa.seed);
    ft_cmd->add_option("--steps", fa.steps)->check(CLI::NonNegativeNumber);
    ft_cmd->add_option("--set", fa.sets);

    SampleArgs sa;
    auto* sample_cmd = app.add_subcommand("sample", "Generate images");
    sample_cmd->add_option("--ckpt", sa.ckpt)->required()->check(CLI::ExistingFile);
    sample_cmd->add_option("--out", sa.out, "Output directory")->required();
    sample_cmd->add_option("--count", sa.count);
    sample_cmd->add_option("--steps", sa.steps);
    sample_cmd->add_option("--lambda", sa.lambda);
    sample_cmd->add_option("--beta", sa.beta);
    sample_cmd->add_option("--size-policy", sa.size_policy, "constant:H,W | uniform:LO,HI | train");
    sample_cmd->add_option("--flip", sa.flip)->check(CLI::IsMember({0, 1}));
    auto* class_opt = sample_cmd->add_option("--class", sa.class_id);
    sample_cmd->add_option("--prompt", sa.prompt)->excludes(class_opt);
    sample_cmd->add_option("--seed", sa.seed);
    sample_cmd->add_option("--columns", sa.columns)->check(CLI::PositiveNumber);
    sample_cmd->add_flag("--raw-weights", sa.raw, "Ignore the EMA shadow");

    EvalArgs ea;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
    eval_cmd->add_option("--ckpt", ea.ckpt)->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--metric", ea.metrics)
        ->required()
        ->check(CLI::IsMember({"fid", "diversity", "flip-acc", "class-acc"}));
    eval_cmd->add_option("--out", ea.out, "Append rows to this CSV");
    eval_cmd->add_option("--count", ea.count);
    eval_cmd->add_option("--steps", ea.steps);
    eval_cmd->add_option("--lambda", ea.lambda);
    eval_cmd->add_option("--beta", ea.beta);
    eval_cmd->add_option("--seed", ea.seed);
    eval_cmd->add_flag("--raw-weights", ea.raw);

    ScheduleArgs sc;
    auto* sched_cmd = app.add_subcommand("schedule", "Print or emit a noise schedule");
    sched_cmd->add_option("--T", sc.T)->check(CLI::PositiveNumber);
    sched_cmd->add_option("--scale", sc.scale)->check(CLI::PositiveNumber);
    sched_cmd->add_option("--rescale-to", sc.rescale_to)->check(CLI::PositiveNumber);
    sched_cmd->add_option("--profile", sc.profile)->check(CLI::IsMember({"cosine", "uniform"}));
    sched_cmd->add_option("--alpha", sc.alpha)->check(CLI::PositiveNumber);
    sched_cmd->add_option("--emit", sc.emit, "CSV path (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? ok : usage;
    }

    try {
        if (*train_cmd) return cmd_train(ta);
        if (*ft_cmd) return cmd_finetune(fa);
        if (*sample_cmd) return cmd_sample(sa);
        if (*eval_cmd) return cmd_eval(ea);
        if (*sched_cmd) return cmd_schedule(sc);
    } catch (const ChecksumError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return checksum;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return numeric;
    } catch (const ParameterError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return usage;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return failure;
    }
    return failure;
}
