#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "xformer/image.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string output;
};

struct WorkDir {
  fs::path path = fs::temp_directory_path() / ("xf_cli_" + std::to_string(::getpid()));
  WorkDir() {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~WorkDir() { fs::remove_all(path); }
} const work;

std::string at(const std::string& leaf) { return (work.path / leaf).string(); }

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Result run(const std::string& args) {
  const std::string out = at("last_output.txt");
  const std::string cmd = std::string("\"") + XF_CLI_PATH + "\" " + args + " > \"" + out + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.output = slurp(out);
  return r;
}

std::size_t count_lines(const std::string& text) {
  std::size_t n = 0;
  for (char c : text) n += c == '\n';
  return n;
}

void write_config(const std::string& path, const std::string& train_extra, const std::string& paths_extra) {
  std::ofstream(path) << "[model]\nbase_channels = 8\ndepths = 1,1,1,1,1,1,1\nrefinement_depth = 1\nwindow = 4\n"
                      << "[train]\ntotal_iters = 50\nlr0 = 1e-3\nprogressive = 0:1:16\nseed = 5\n"
                      << "val_every = 25\ncheckpoint_every = 25\n"
                      << train_extra << "[paths]\ndata = " << at("train") << "\nval = " << at("val") << "\n"
                      << paths_extra;
}

// Small data set shared by the training cases.
void ensure_data() {
  static bool done = false;
  if (done) return;
  REQUIRE(run("make-synthetic --out \"" + at("train") + "\" --count 4 --size 24 --seed 1").code == 0);
  REQUIRE(run("make-synthetic --out \"" + at("val") + "\" --count 2 --size 16 --seed 2").code == 0);
  fs::create_directories(at("empty"));
  done = true;
}

}  // namespace

TEST_CASE("describe reports the default model") {
  const auto r = run("describe");
  CHECK(r.code == 0);
  CHECK(r.output.find("parameters 25221505 (25.22M)") != std::string::npos);
  CHECK(r.output.find("flops 42148134912 (42.15G) at 3x128x128") != std::string::npos);
  CHECK(r.output.find("bottleneck") != std::string::npos);

  const auto off = run("describe --ablation off --input-size 64");
  CHECK(off.code == 0);
  CHECK(off.output.find("parameters 24699217") != std::string::npos);
  CHECK(run("describe --tiny --input-size 32").output.find("flops 30797056") != std::string::npos);
}

TEST_CASE("usage errors exit with 2") {
  CHECK(run("--help").code == 0);
  CHECK(run("").code == 2);
  CHECK(run("describe --ablation sideways").code == 2);
  CHECK(run("describe --frobnicate").code == 2);
  std::ofstream(at("bad.cfg")) << "[model]\nwindow = many\n";
  const auto bad = run("describe --config \"" + at("bad.cfg") + "\"");
  CHECK(bad.code == 2);
  CHECK(bad.output.find("line 2") != std::string::npos);
  CHECK(run("describe --config \"" + at("missing.cfg") + "\"").code == 2);
}

TEST_CASE("train writes one log row per iteration and repeats exactly") {
  ensure_data();
  write_config(at("run.cfg"), "", "log = " + at("run1.csv") + "\n");
  const auto first = run("train --config \"" + at("run.cfg") + "\" --out \"" + at("run1.xfmr") + "\"");
  REQUIRE(first.code == 0);
  const std::string log = slurp(at("run1.csv"));
  CHECK(count_lines(log) == 51);
  CHECK(log.rfind("iter,lr,batch,patch,loss,val_psnr,val_ssim\n", 0) == 0);

  write_config(at("run2.cfg"), "", "log = " + at("run2.csv") + "\n");
  REQUIRE(run("train --config \"" + at("run2.cfg") + "\" --out \"" + at("run2.xfmr") + "\"").code == 0);
  CHECK(slurp(at("run2.csv")) == log);
  CHECK(slurp(at("run2.xfmr")) == slurp(at("run1.xfmr")));
}

TEST_CASE("train resumes to the same result") {
  ensure_data();
  write_config(at("full.cfg"), "", "log = " + at("full.csv") + "\n");
  REQUIRE(run("train --config \"" + at("full.cfg") + "\" --out \"" + at("full.xfmr") + "\"").code == 0);

  write_config(at("split.cfg"), "", "log = " + at("split.csv") + "\n");
  const std::string base = "train --config \"" + at("split.cfg") + "\" --out \"" + at("split.xfmr") + "\"";
  REQUIRE(run(base + " --stop-at 20").code == 0);
  CHECK(count_lines(slurp(at("split.csv"))) == 21);
  const auto resumed = run(base + " --resume \"" + at("split.xfmr") + "\"");
  REQUIRE(resumed.code == 0);
  CHECK(resumed.output.find("trained to iteration 50") != std::string::npos);
  CHECK(slurp(at("split.csv")) == slurp(at("full.csv")));
  CHECK(slurp(at("split.xfmr")) == slurp(at("full.xfmr")));

  const auto other = run("train --config \"" + at("split.cfg") + "\" --ablation off --out \"" + at("x.xfmr") +
                         "\" --resume \"" + at("split.xfmr") + "\"");
  CHECK(other.code == 2);
}

TEST_CASE("train input and numeric failures") {
  ensure_data();
  std::ofstream(at("nodata.cfg")) << "[model]\nbase_channels = 8\ndepths = 1,1,1,1,1,1,1\nwindow = 4\n"
                                  << "[train]\ntotal_iters = 2\nprogressive = 0:1:16\n[paths]\ndata = "
                                  << at("does_not_exist") << "\n";
  CHECK(run("train --config \"" + at("nodata.cfg") + "\"").code == 2);

  std::ofstream(at("empty.cfg")) << "[model]\nbase_channels = 8\ndepths = 1,1,1,1,1,1,1\nwindow = 4\n"
                                 << "[train]\ntotal_iters = 2\nprogressive = 0:1:16\n[paths]\ndata = " << at("empty")
                                 << "\n";
  CHECK(run("train --config \"" + at("empty.cfg") + "\"").code == 2);

  write_config(at("wild.cfg"), "", "");
  std::string text = slurp(at("wild.cfg"));
  text.replace(text.find("lr0 = 1e-3"), 10, "lr0 = 1e30");
  std::ofstream(at("wild.cfg")) << text;
  const auto wild = run("train --config \"" + at("wild.cfg") + "\"");
  CHECK(wild.code == 3);
  CHECK(wild.output.find("non-finite") != std::string::npos);
}

TEST_CASE("an identity checkpoint denoises to the input") {
  ensure_data();
  REQUIRE(run("init --tiny --zero-output --out \"" + at("identity.xfmr") + "\"").code == 0);
  const std::string in = at("train") + "/img_000.png";
  REQUIRE(run("denoise --checkpoint \"" + at("identity.xfmr") + "\" --input \"" + in + "\" --out \"" +
              at("same.png") + "\"")
              .code == 0);
  CHECK(xf::image_read(at("same.png")) == xf::image_read(in));

  const std::string noisy = "denoise --checkpoint \"" + at("identity.xfmr") + "\" --input \"" + in +
                            "\" --sigma 25 --seed 3 --out ";
  REQUIRE(run(noisy + "\"" + at("n1.png") + "\"").code == 0);
  REQUIRE(run(noisy + "\"" + at("n2.png") + "\"").code == 0);
  CHECK(slurp(at("n1.png")) == slurp(at("n2.png")));
  CHECK(slurp(at("n1.png")) != slurp(in));

  xf::image_write(xf::synthetic_image(16, 16, 1, 4), at("gray.pgm"));
  CHECK(run("denoise --checkpoint \"" + at("identity.xfmr") + "\" --input \"" + at("gray.pgm") + "\" --out \"" +
            at("g.png") + "\"")
            .code == 2);
  std::ofstream(at("junk.xfmr")) << "XFMR but not really";
  CHECK(run("denoise --checkpoint \"" + at("junk.xfmr") + "\" --input \"" + in + "\" --out \"" + at("j.png") + "\"")
            .code == 2);
}

TEST_CASE("eval reports and repeats exactly") {
  ensure_data();
  REQUIRE(run("init --tiny --zero-output --out \"" + at("identity.xfmr") + "\"").code == 0);
  const std::string base = "eval --checkpoint \"" + at("identity.xfmr") + "\" --data \"" + at("val") + "\"";

  const auto clean = run(base + " --sigma 0 --out \"" + at("clean.csv") + "\"");
  REQUIRE(clean.code == 0);
  CHECK(slurp(at("clean.csv")).find("mean,100.000000,100.000000,1.000000") != std::string::npos);

  REQUIRE(run(base + " --seed 7 --out \"" + at("e1.csv") + "\"").code == 0);
  REQUIRE(run(base + " --seed 7 --out \"" + at("e2.csv") + "\"").code == 0);
  const std::string csv = slurp(at("e1.csv"));
  CHECK(csv == slurp(at("e2.csv")));
  CHECK(count_lines(csv) == 4);
  CHECK(csv.find("img_001.png,") != std::string::npos);

  CHECK(run("eval --checkpoint \"" + at("identity.xfmr") + "\" --data \"" + at("empty") + "\"").code == 2);
  CHECK(run("eval --checkpoint \"" + at("identity.xfmr") + "\" --data \"" + at("nowhere") + "\"").code == 2);
}
