#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cfm/config.hpp"
#include "cfm/data.hpp"
#include "cfm/image_io.hpp"

namespace fs = std::filesystem;

namespace {

std::string cli_binary() {
    const char* env = std::getenv("CFMNET_BIN");
    REQUIRE_MESSAGE(env != nullptr, "CFMNET_BIN must point at the cfmnet binary");
    return env;
}

struct RunResult {
    int exit_code = -1;
    std::string output;
};

RunResult run_cli(const std::string& args) {
    const std::string out_file = "/tmp/cfm_cli_out.txt";
    const std::string cmd = cli_binary() + " " + args + " > " + out_file + " 2>&1";
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(out_file);
    std::stringstream ss;
    ss << in.rdbuf();
    r.output = ss.str();
    return r;
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::trunc);
    out << content;
}

// Small deterministic workspace: corpus + config for desk-scale runs.
struct Workspace {
    std::string root;

    explicit Workspace(const std::string& name) : root("/tmp/cfm_ws_" + name) {
        fs::remove_all(root);
        fs::create_directories(root + "/train");
        fs::create_directories(root + "/test");
        for (int i = 0; i < 4; ++i) {
            cfm::save_image(cfm::synth_image(100 + static_cast<std::uint64_t>(i), 1, 48, 48),
                            root + "/train/t" + std::to_string(i) + ".pgm");
        }
        for (int i = 0; i < 2; ++i) {
            cfm::save_image(cfm::synth_image(200 + static_cast<std::uint64_t>(i), 1, 48, 48),
                            root + "/test/v" + std::to_string(i) + ".pgm");
        }
    }
    ~Workspace() { fs::remove_all(root); }

    std::string config(const std::string& extra = "") const {
        const std::string path = root + "/run.cfg";
        write_file(path,
                   "model.widths = 8,16,32\n"
                   "model.in_channels = 1\n"
                   "train.patch_size = 16\n"
                   "train.batch_size = 2\n"
                   "train.patches_per_epoch = 8\n"
                   "train.epochs_main = 1\n"
                   "train.epochs_finetune = 1\n"
                   "train.lr_start = 1e-3\n"
                   "train.lr_end_main = 5e-4\n"
                   "train.lr_end_finetune = 1e-4\n"
                   "train.seed = 13\n"
                   "data.train_dir = " + root + "/train\n"
                   "data.val_dir = " + root + "/test\n"
                   "out.dir = " + root + "/out\n" + extra);
        return path;
    }
};

}  // namespace

TEST_CASE("run config parses, validates and round-trips") {
    const std::string text =
        "# comment line\n"
        "model.widths = 8,16,32  # trailing comment\n"
        "train.sigma_max = 50\n"
        "train.seed = 7\n"
        "ablate.ops = 1,3\n";
    auto cfg = cfm::parse_run_config(text);
    CHECK(cfg.model.scale_widths[0] == 8);
    CHECK(cfg.train.sigma_max == doctest::Approx(50.0 / 255.0));
    CHECK(cfg.ablate_ops == std::vector<int>{1, 3});

    auto round = cfm::parse_run_config(cfm::serialize_run_config(cfg));
    CHECK(round == cfg);
}

TEST_CASE("run config rejects malformed input with line numbers") {
    try {
        cfm::parse_run_config("model.widths = 8,16,32\nlr= \n");
        FAIL("expected ConfigError");
    } catch (const cfm::ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("line 2") != std::string::npos);
    }

    CHECK_THROWS_AS(cfm::parse_run_config("unknown.key = 1\n"), cfm::ConfigError);
    CHECK_THROWS_AS(cfm::parse_run_config("model.kind = diagonal\n"), cfm::ConfigError);
    CHECK_THROWS_AS(cfm::parse_run_config("train.batch_size = -3\n"), cfm::ConfigError);
    CHECK_THROWS_AS(cfm::parse_run_config("no equals sign\n"), cfm::ConfigError);
    // widths must stay increasing (model validation)
    CHECK_THROWS_AS(cfm::parse_run_config("model.widths = 32,16,8\n"), cfm::ConfigError);
}

TEST_CASE("pgm/ppm round-trip is bit-identical") {
    const std::string dir = "/tmp/cfm_io_test";
    fs::remove_all(dir);
    fs::create_directories(dir);

    auto gray = cfm::synth_image(1, 1, 24, 17);
    cfm::save_image(gray, dir + "/g.pgm");
    auto gray2 = cfm::load_image(dir + "/g.pgm");
    cfm::save_image(gray2, dir + "/g2.pgm");
    std::ifstream a(dir + "/g.pgm", std::ios::binary), b(dir + "/g2.pgm", std::ios::binary);
    std::stringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    CHECK(sa.str() == sb.str());

    auto color = cfm::synth_image(2, 3, 15, 21);
    cfm::save_image(color, dir + "/c.ppm");
    auto color2 = cfm::load_image(dir + "/c.ppm");
    CHECK(color2.channels == 3);
    cfm::save_image(color2, dir + "/c2.ppm");
    std::ifstream ca(dir + "/c.ppm", std::ios::binary), cb(dir + "/c2.ppm", std::ios::binary);
    std::stringstream sca, scb;
    sca << ca.rdbuf();
    scb << cb.rdbuf();
    CHECK(sca.str() == scb.str());

    fs::remove_all(dir);
}

TEST_CASE("image loader rejects malformed files") {
    const std::string dir = "/tmp/cfm_io_bad";
    fs::remove_all(dir);
    fs::create_directories(dir);

    write_file(dir + "/ascii.pgm", "P2\n2 2\n255\n0 1 2 3\n");
    CHECK_THROWS_AS(cfm::load_image(dir + "/ascii.pgm"), cfm::DataError);

    write_file(dir + "/trunc.pgm", "P5\n4 4\n255\nab");
    CHECK_THROWS_AS(cfm::load_image(dir + "/trunc.pgm"), cfm::DataError);

    CHECK_THROWS_AS(cfm::load_image(dir + "/missing.pgm"), cfm::DataError);
    fs::remove_all(dir);
}

TEST_CASE("cli: train smoke produces a model file") {
    Workspace ws("train");
    auto r = run_cli("train --config " + ws.config());
    CHECK_MESSAGE(r.exit_code == 0, r.output);
    CHECK(fs::exists(ws.root + "/out/model.bin"));
    CHECK(fs::exists(ws.root + "/out/train.log"));
}

TEST_CASE("cli: malformed config exits 2 with the line number") {
    Workspace ws("badcfg");
    const std::string path = ws.root + "/bad.cfg";
    write_file(path, "model.widths = 8,16,32\nlr= \n");
    auto r = run_cli("train --config " + path);
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("line 2") != std::string::npos);
}

TEST_CASE("cli: empty corpus exits 3") {
    Workspace ws("empty");
    fs::create_directories(ws.root + "/none");
    const std::string path = ws.root + "/empty.cfg";
    write_file(path,
               "model.widths = 8,16,32\n"
               "train.patch_size = 16\n"
               "train.batch_size = 2\n"
               "train.patches_per_epoch = 8\n"
               "train.lr_start = 1e-3\n"
               "train.lr_end_main = 5e-4\n"
               "train.lr_end_finetune = 1e-4\n"
               "data.train_dir = " + ws.root + "/none\n"
               "out.dir = " + ws.root + "/out\n");
    auto r = run_cli("train --config " + path);
    CHECK(r.exit_code == 3);
}

TEST_CASE("cli: denoise handles sigma, maps and non-multiple-of-4 sizes") {
    Workspace ws("denoise");
    auto r = run_cli("train --config " + ws.config());
    REQUIRE_MESSAGE(r.exit_code == 0, r.output);
    const std::string model = ws.root + "/out/model.bin";

    // 65x67 input: pad-and-crop must restore the exact size
    cfm::save_image(cfm::synth_image(300, 1, 65, 67), ws.root + "/odd.pgm");
    r = run_cli("denoise --model " + model + " --input " + ws.root + "/odd.pgm --sigma 25 " +
                "--output " + ws.root + "/odd_out.pgm");
    CHECK_MESSAGE(r.exit_code == 0, r.output);
    auto out = cfm::load_image(ws.root + "/odd_out.pgm");
    CHECK(out.height == 65);
    CHECK(out.width == 67);

    // negative sigma -> exit 4
    r = run_cli("denoise --model " + model + " --input " + ws.root + "/odd.pgm --sigma -5 " +
                "--output " + ws.root + "/x.pgm");
    CHECK(r.exit_code == 4);

    // peaks map runs without retraining
    r = run_cli("denoise --model " + model + " --input " + ws.root + "/odd.pgm --peaks-sigma 50 " +
                "--output " + ws.root + "/peaks_out.pgm --ref " + ws.root + "/odd.pgm");
    CHECK_MESSAGE(r.exit_code == 0, r.output);
    CHECK(r.output.find("psnr=") != std::string::npos);

    // mismatched map dims -> exit 4
    cfm::save_image(cfm::synth_image(301, 1, 32, 32), ws.root + "/small_map.pgm");
    r = run_cli("denoise --model " + model + " --input " + ws.root + "/odd.pgm --map " +
                ws.root + "/small_map.pgm --output " + ws.root + "/y.pgm");
    CHECK(r.exit_code == 4);
}

TEST_CASE("cli: eval emits deterministic csv with the expected row count") {
    Workspace ws("eval");
    auto r = run_cli("train --config " + ws.config());
    REQUIRE_MESSAGE(r.exit_code == 0, r.output);
    const std::string model = ws.root + "/out/model.bin";

    const std::string csv1 = ws.root + "/eval1.csv", csv2 = ws.root + "/eval2.csv";
    r = run_cli("eval --model " + model + " --testdir " + ws.root + "/test " +
                "--sigmas 15,25,50,75 --seed 3 --out " + csv1);
    CHECK_MESSAGE(r.exit_code == 0, r.output);
    r = run_cli("eval --model " + model + " --testdir " + ws.root + "/test " +
                "--sigmas 15,25,50,75 --seed 3 --out " + csv2);
    CHECK(r.exit_code == 0);

    std::ifstream a(csv1), b(csv2);
    std::stringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    CHECK(sa.str() == sb.str());

    // 2 images x 4 sigmas + header + mean
    int lines = 0;
    std::string line;
    std::ifstream in(csv1);
    while (std::getline(in, line)) ++lines;
    CHECK(lines == 10);
    CHECK(sa.str().rfind("image,sigma,psnr_noisy,psnr,ssim\n", 0) == 0);

    // empty testdir -> exit 3
    fs::create_directories(ws.root + "/none");
    r = run_cli("eval --model " + model + " --testdir " + ws.root + "/none --out -");
    CHECK(r.exit_code == 3);
}

TEST_CASE("cli: selftest negative control names the corrupted check") {
    auto r = run_cli("selftest --inject-conv-bug");
    CHECK(r.exit_code == 1);
    CHECK(r.output.find("FAIL grad_check/conv2d") != std::string::npos);
}

TEST_CASE("cli: gen-data writes loadable deterministic images") {
    const std::string dir = "/tmp/cfm_gendata";
    fs::remove_all(dir);
    auto r = run_cli("gen-data --out " + dir + " --count 3 --size 32 --seed 5");
    CHECK_MESSAGE(r.exit_code == 0, r.output);
    auto corpus = cfm::load_corpus(dir, 1);
    CHECK(corpus.images.size() == 3);
    CHECK(corpus.images[0].height == 32);
    fs::remove_all(dir);
}

TEST_CASE("cli: resume mid-run reproduces the uninterrupted model byte-for-byte") {
    Workspace ws("resume");
    const std::string cfg = ws.config("train.epochs_main = 2\n");

    // uninterrupted run: 2 main epochs + 1 fine-tune epoch
    auto r = run_cli("train --config " + cfg);
    REQUIRE_MESSAGE(r.exit_code == 0, r.output);
    fs::copy_file(ws.root + "/out/model.bin", ws.root + "/model_full.bin");

    // interrupted run: stop after the first epoch, then resume from the
    // checkpoint and finish the schedule
    fs::remove_all(ws.root + "/out");
    r = run_cli("train --config " + cfg + " --stop-after-epochs 1");
    REQUIRE_MESSAGE(r.exit_code == 0, r.output);
    REQUIRE(fs::exists(ws.root + "/out/latest.ckpt"));
    CHECK_FALSE(fs::exists(ws.root + "/out/model.bin"));
    r = run_cli("train --config " + cfg + " --resume " + ws.root + "/out/latest.ckpt");
    CHECK_MESSAGE(r.exit_code == 0, r.output);

    std::ifstream fa(ws.root + "/model_full.bin", std::ios::binary);
    std::ifstream fb(ws.root + "/out/model.bin", std::ios::binary);
    std::stringstream sa, sb;
    sa << fa.rdbuf();
    sb << fb.rdbuf();
    CHECK(sa.str() == sb.str());
}
