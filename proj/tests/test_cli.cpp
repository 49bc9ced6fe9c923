#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "qsynth/binio.hpp"
#include "qsynth/container.hpp"

using namespace qsynth;
namespace fs = std::filesystem;

namespace {

#ifndef QSYNTH_CLI_PATH
#error "QSYNTH_CLI_PATH must point at the CLI binary"
#endif

struct CmdResult {
  int exit_code;
  std::string output;
};

CmdResult run_cli(const std::string& args) {
  const std::string cmd = std::string(QSYNTH_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string out;
  char buf[512];
  while (fgets(buf, sizeof buf, pipe)) out += buf;
  const int status = pclose(pipe);
  return {WEXITSTATUS(status), out};
}

std::string temp_dir(const std::string& name) {
  const std::string d = (fs::temp_directory_path() / ("qsynth_cli_" + name)).string();
  fs::remove_all(d);
  return d;
}

}  // namespace

TEST_CASE("phantom: cardinality, determinism, validation exit code") {
  const std::string d1 = temp_dir("ph1"), d2 = temp_dir("ph2");
  const auto r1 = run_cli("phantom --size 64 --seed 7 --shells 0,1000,2000 --dirs 30 --out " + d1);
  REQUIRE(r1.exit_code == 0);
  const auto ds = load_dwi_dataset(d1);
  CHECK(ds.scheme.size() == 61);  // 1 b0 + 30 + 30

  const auto r2 = run_cli("phantom --size 64 --seed 7 --shells 0,1000,2000 --dirs 30 --out " + d2);
  REQUIRE(r2.exit_code == 0);
  // identical digests on identical args
  const auto digest_of = [](const std::string& s) {
    const auto pos = s.find("digest ");
    REQUIRE(pos != std::string::npos);
    return s.substr(pos + 7, 16);
  };
  CHECK(digest_of(r1.output) == digest_of(r2.output));

  const auto bad = run_cli("phantom --size 16 --out " + temp_dir("ph3"));
  CHECK(bad.exit_code == 1);
  CHECK(!fs::exists(temp_dir("ph3") + "/meta.json"));
}

TEST_CASE("train validation errors") {
  const std::string data = temp_dir("trdata");
  REQUIRE(run_cli("phantom --size 32 --shells 0,1000 --dirs 4 --out " + data).exit_code == 0);
  const auto r = run_cli("train --data " + data + " --out " + temp_dir("tr") +
                         " --epochs 0 --base-channels 8");
  CHECK(r.exit_code == 1);
  const auto r2 = run_cli("train --data /nonexistent --out " + temp_dir("tr2"));
  CHECK(r2.exit_code == 2);
}

TEST_CASE("end-to-end: train, synth, fit, metrics, plot") {
  const std::string data = temp_dir("e2e_data");
  const std::string train = temp_dir("e2e_train");
  const std::string synth = temp_dir("e2e_synth");
  const std::string dti = temp_dir("e2e_dti");

  REQUIRE(run_cli("phantom --size 32 --seed 3 --shells 0,1000,2000 --dirs 8 --out " + data)
              .exit_code == 0);
  REQUIRE(run_cli("train --data " + data + " --out " + train +
                  " --epochs 2 --batch-size 4 --base-channels 8 --d-base-channels 8 "
                  "--n-res-blocks 2 --q-embed-dim 16 --attention-reduction 4")
              .exit_code == 0);
  CHECK(fs::exists(train + "/loss.csv"));
  CHECK(fs::exists(train + "/ckpt_epoch_001/arch.json"));
  CHECK(fs::exists(train + "/config_resolved.json"));

  // flexible q: more directions than trained, plus an unseen shell
  const auto rs = run_cli("synth --ckpt " + train + "/ckpt_final --data " + data +
                          " --shells 0,500,1000 --dirs 12 --out " + synth);
  REQUIRE(rs.exit_code == 0);
  const auto sds = load_dwi_dataset(synth);
  CHECK(sds.scheme.size() == 25);

  REQUIRE(run_cli("fit-dti --data " + synth + " --shell 1000 --out " + dti).exit_code == 0);
  const auto maps = load_map_stack(dti);
  CHECK(maps.find_channel("fa") >= 0);
  CHECK(maps.find_channel("md") >= 0);

  SUBCASE("metrics on identical containers") {
    const auto rm = run_cli("metrics --a " + data + " --b " + data);
    REQUIRE(rm.exit_code == 0);
    CHECK(rm.output.find("\"rmse\": 0.0") != std::string::npos);
    CHECK(rm.output.find("\"ms_ssim\": 1.0") != std::string::npos);
    CHECK(rm.output.find("\"psnr\": 100.0") != std::string::npos);
  }

  SUBCASE("plot produces a PNG of the exact map size") {
    const std::string png = temp_dir("plots") + "/fa.png";
    fs::create_directories(fs::path(png).parent_path());
    REQUIRE(run_cli("plot --in " + dti + " --map fa --out " + png).exit_code == 0);
    const auto bytes = read_bytes(png);
    REQUIRE(bytes.size() > 33);
    // IHDR width/height at offsets 16..23, big-endian
    auto be32 = [&](std::size_t off) {
      return (std::uint32_t(std::uint8_t(bytes[off])) << 24) |
             (std::uint32_t(std::uint8_t(bytes[off + 1])) << 16) |
             (std::uint32_t(std::uint8_t(bytes[off + 2])) << 8) |
             std::uint32_t(std::uint8_t(bytes[off + 3]));
    };
    CHECK(be32(16) == 32);
    CHECK(be32(20) == 32);
    CHECK(fs::exists(png + ".json"));
    SUBCASE("side-by-side error panel is three maps wide") {
      const std::string png3 = temp_dir("plots3") + "/fa3.png";
      fs::create_directories(fs::path(png3).parent_path());
      REQUIRE(run_cli("plot --in " + dti + " --ref " + dti + " --map fa --out " + png3)
                  .exit_code == 0);
      const auto b3 = read_bytes(png3);
      auto be32b = [&](std::size_t off) {
        return (std::uint32_t(std::uint8_t(b3[off])) << 24) |
               (std::uint32_t(std::uint8_t(b3[off + 1])) << 16) |
               (std::uint32_t(std::uint8_t(b3[off + 2])) << 8) |
               std::uint32_t(std::uint8_t(b3[off + 3]));
      };
      CHECK(be32b(16) == 96);
      CHECK(be32b(20) == 32);
    }
  }

  SUBCASE("synth beyond the trained b range fails validation") {
    const auto r = run_cli("synth --ckpt " + train + "/ckpt_final --data " + data +
                           " --shells 0,3000 --dirs 4 --out " + temp_dir("far"));
    CHECK(r.exit_code == 1);
  }

  SUBCASE("corrupt checkpoint version exits with the format code") {
    const std::string broken = temp_dir("broken_ckpt");
    fs::create_directories(broken);
    for (const auto& f : fs::directory_iterator(train + "/ckpt_final"))
      fs::copy(f.path(), fs::path(broken) / f.path().filename());
    auto text = read_text(broken + "/arch.json");
    const auto pos = text.find("qsynth-ckpt-1");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 13, "qsynth-ckpt-0");
    write_text(broken + "/arch.json", text);
    const auto r = run_cli("synth --ckpt " + broken + " --data " + data +
                           " --shells 0,1000 --dirs 2 --out " + temp_dir("x"));
    CHECK(r.exit_code == 4);
  }

  SUBCASE("mismatched fsl tables exit with the format code") {
    const std::string bdir = temp_dir("badfsl");
    fs::create_directories(bdir);
    write_text(bdir + "/bvals", "0 1000 2000\n");
    write_text(bdir + "/bvecs", "0 1\n0 0\n0 0\n");
    const auto r = run_cli("synth --ckpt " + train + "/ckpt_final --data " + data +
                           " --bvals " + bdir + "/bvals --bvecs " + bdir +
                           "/bvecs --out " + temp_dir("y"));
    CHECK(r.exit_code == 4);
  }
}

TEST_CASE("pipeline runs end to end from one config file") {
  const std::string out = temp_dir("pipe");
  const std::string cfg = temp_dir("pipecfg") + ".ini";
  std::ofstream f(cfg);
  f << "# tiny smoke pipeline\n"
       "[phantom]\nsize = 32\nseed = 5\nshells = 0,1000\ndirs = 6\n\n"
       "[train]\nepochs = 1\nbatch_size = 4\nbase_channels = 8\nd_base_channels = 8\n"
       "n_res_blocks = 2\nq_embed_dim = 16\nattention_reduction = 4\nholdout = 2\n\n"
       "[synth]\nshells = 1000\ndirs = 8\n\n"
       "[fit_dti]\nshell = 1000\n";
  f.close();
  const auto r = run_cli("run --config " + cfg + " --out " + out);
  REQUIRE(r.exit_code == 0);
  CHECK(fs::exists(out + "/data/meta.json"));
  CHECK(fs::exists(out + "/train/ckpt_final/weights.bin"));
  CHECK(fs::exists(out + "/synth/meta.json"));
  CHECK(fs::exists(out + "/dti_synth/maps.bin"));
  CHECK(fs::exists(out + "/dti_ref/maps.bin"));
  CHECK(fs::exists(out + "/metrics.json"));
  CHECK(fs::exists(out + "/config_resolved.ini"));

  SUBCASE("unknown config section fails validation before any output") {
    const std::string cfg2 = temp_dir("pipecfg2") + ".ini";
    std::ofstream f2(cfg2);
    f2 << "[phantom]\nsize = 32\n[bogus]\nx = 1\n";
    f2.close();
    const std::string out2 = temp_dir("pipe2");
    const auto r2 = run_cli("run --config " + cfg2 + " --out " + out2);
    CHECK(r2.exit_code == 1);
    CHECK(!fs::exists(out2 + "/data"));
  }
}
