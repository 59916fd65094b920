#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "dfkt/checkpoint.hpp"
#include "dfkt/schedules.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path work = fs::temp_directory_path() / "dfkt_test_cli";

int run(const std::string& args) {
    const std::string cmd = std::string(DFKT_CLI) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

std::string path(const std::string& name) { return (work / name).string(); }

void write_tiny_config() {
    std::ofstream(work / "tiny.cfg") << "# tiny model\n"
                                        "model.image_size = 8\ndata.resolution = 8\n"
                                        "model.width = 16\nmodel.cond_width = 16\nmodel.depth = 1\n"
                                        "model.heads = 2\nmodel.embed_dim = 8\nmodel.mlp_ratio = 2\n"
                                        "data.classes = 4\nmodel.vocab = 4\n"
                                        "train.batch = 4\ntrain.dataset_size = 16\nschedule.steps = 100\n";
}

} // namespace

TEST_CASE("cli") {
    fs::remove_all(work);
    fs::create_directories(work);
    write_tiny_config();

    SUBCASE("usage errors") {
        CHECK(run("") == 2);
        CHECK(run("train --out x --no-such-flag") == 2);
        CHECK(run("sample --ckpt") == 2);
        CHECK(run("train --out " + path("c.ckpt") + " --crop-strategy tiny") == 2);
    }

    SUBCASE("schedule rescaling row") {
        REQUIRE(run("schedule --T 1000 --scale 1 --rescale-to 2 --emit " + path("s.csv")) == 0);
        std::ifstream in(work / "s.csv");
        std::string line;
        std::getline(in, line);
        CHECK(line == "t,beta,alpha_bar,sigma,gamma_c,beta_rescaled,alpha_bar_rescaled,sigma_rescaled");
        double best_gap = 1.0, ab_at = 0.0, moved_at = 0.0;
        int rows = 0;
        while (std::getline(in, line)) {
            std::stringstream ss(line);
            std::string cell;
            std::vector<double> v;
            while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
            REQUIRE(v.size() == 8);
            CHECK(v[6] < v[2]);
            if (std::abs(v[2] - 0.5) < best_gap) {
                best_gap = std::abs(v[2] - 0.5);
                ab_at = v[2];
                moved_at = v[6];
            }
            ++rows;
        }
        CHECK(rows == 1000);
        // Keeping sigma / s fixed: abar' = abar / (abar + 4 (1 - abar)); 0.5 maps to 0.2.
        CHECK(moved_at == doctest::Approx(ab_at / (ab_at + 4.0 * (1.0 - ab_at))).epsilon(1e-12));
        CHECK(moved_at == doctest::Approx(0.2).epsilon(0.01));
    }

    SUBCASE("train, sample, eval, finetune") {
        const std::string ck = path("tiny.ckpt");
        REQUIRE(run("train --config " + path("tiny.cfg") + " --steps 0 --out " + ck) == 0);
        const std::string bytes = slurp(ck);
        dfkt::save_checkpoint(work / "copy.ckpt", dfkt::load_checkpoint(ck));
        CHECK(slurp(work / "copy.ckpt") == bytes);

        REQUIRE(run("train --config " + path("tiny.cfg") + " --steps 3 --seed 4 --out " + path("a.ckpt")) == 0);
        REQUIRE(run("train --config " + path("tiny.cfg") + " --steps 3 --seed 4 --out " + path("b.ckpt")) == 0);
        CHECK(slurp(work / "a.ckpt") == slurp(work / "b.ckpt"));
        CHECK(slurp(work / "a.ckpt.metrics.csv").rfind("step,loss,grad_norm,lr\n0,", 0) == 0);

        const std::string sample = "sample --ckpt " + path("a.ckpt") +
                                   " --count 5 --steps 4 --lambda 1 --beta 1 --seed 9 --size-policy train --out ";
        REQUIRE(run(sample + path("s1")) == 0);
        REQUIRE(run(sample + path("s2")) == 0);
        CHECK(fs::exists(work / "s1" / "sample_0004.ppm"));
        for (const auto& name : {"grid.ppm", "sample_0000.ppm", "sample_0004.ppm"}) {
            CHECK(slurp(work / "s1" / name) == slurp(work / "s2" / name));
        }
        CHECK(run("sample --ckpt " + path("a.ckpt") + " --count 2 --steps 4 --class 1 --flip 1 --out " +
                  path("s3")) == 0);
        CHECK(run("sample --ckpt " + path("a.ckpt") + " --count 2 --steps 4 --class 9 --out " + path("s4")) == 2);

        const std::string before = slurp(work / "a.ckpt");
        REQUIRE(run("eval --ckpt " + path("a.ckpt") +
                    " --metric class-acc --metric flip-acc --count 8 --steps 3 --out " + path("eval.csv")) == 0);
        CHECK(slurp(work / "a.ckpt") == before);
        const std::string csv = slurp(work / "eval.csv");
        CHECK(csv.rfind("metric,value,config_hash,seed\nclass_acc,", 0) == 0);
        CHECK(csv.find("flip_acc,") != std::string::npos);

        CHECK(run("finetune --from " + path("a.ckpt") + " --resolution 12 --out " + path("f.ckpt")) == 2);
        REQUIRE(run("finetune --from " + path("a.ckpt") +
                    " --resolution 16 --steps 1 --rescale-schedule 0 --out " + path("f.ckpt")) == 0);
        const dfkt::Checkpoint ft = dfkt::load_checkpoint(work / "f.ckpt");
        CHECK(ft.config.model.image_size == 16);
        CHECK(ft.schedule.alpha_bars == dfkt::load_checkpoint(work / "a.ckpt").schedule.alpha_bars);
    }

    SUBCASE("corrupt checkpoint") {
        const std::string ck = path("c.ckpt");
        REQUIRE(run("train --config " + path("tiny.cfg") + " --steps 0 --out " + ck) == 0);
        std::string bytes = slurp(ck);
        bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 1);
        std::ofstream(ck, std::ios::binary) << bytes;
        CHECK(run("sample --ckpt " + ck + " --out " + path("x")) == 3);
        CHECK(run("eval --ckpt " + ck + " --metric fid") == 3);
    }

    SUBCASE("divergence") {
        const std::string ck = path("d.ckpt");
        CHECK(run("train --config " + path("tiny.cfg") + " --steps 20 --set train.lr=1e30 --out " + ck) == 4);
        CHECK_FALSE(fs::exists(ck));
        CHECK(fs::exists(ck + ".last_good"));
    }
}
