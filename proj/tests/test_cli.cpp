#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"

namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(RELSPRAY_CLI) + " -q " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

fs::path work() {
  static const fs::path d = [] {
    const fs::path p = fs::temp_directory_path() / "relspray_cli_tests";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return d;
}

std::string smoke() { return (fs::path(RELSPRAY_SOURCE_DIR) / "configs" / "smoke.toml").string(); }

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("usage and configuration errors exit with 2") {
    CHECK(run("") == 2);
    CHECK(run("--bogus") == 2);
    CHECK(run("run --config /nonexistent/x.toml") == 2);
    const fs::path bad = work() / "typo.toml";
    std::ofstream(bad) << "[train]\nepoch = 3\n";
    CHECK(run("run --config " + q(bad) + " --out " + q(work() / "typo_run")) == 2);
    CHECK(run("fit --echoes a.nii --te 1,1,1 --out x") != 0);
  }

  TEST_CASE("unreadable data exits with 3") {
    const fs::path bad = work() / "bad.nii";
    std::ofstream(bad) << "not a nifti";
    CHECK(run("fit --echoes " + q(bad) + " --te 4.92,9.84,14.76 --out " + q(work() / "fit_bad")) == 3);
    CHECK(run("report --run " + q(work() / "does_not_exist")) == 3);
  }

  TEST_CASE("subcommands chain from phantoms to an embedding") {
    const fs::path d = work();
    REQUIRE(run("phantom --spec " + smoke() + " --n-per-class 10 --out " + q(d / "data")) == 0);
    CHECK(fs::exists(d / "data" / "labels.csv"));
    CHECK(fs::exists(d / "data" / "scan-0001" / "echoes.nii"));
    CHECK(run("fit --echoes " + q(d / "data" / "scan-0001" / "echoes.nii") +
              " --te 4.92,9.84,14.76,19.68,24.6,29.52 --mask " + q(d / "data" / "scan-0001" / "brain_mask.nii") +
              " --out " + q(d / "fit")) == 0);
    CHECK(fs::exists(d / "fit" / "r2star.nii"));
    REQUIRE(run("--seed 3 train --config " + smoke() + " --variant C --data " + q(d / "data") + " --out " +
                q(d / "ckpt")) == 0);
    CHECK(fs::exists(d / "ckpt" / "model.bin"));
    REQUIRE(run("heatmap --ckpt " + q(d / "ckpt") + " --data " + q(d / "data") + " --config " + smoke() + " --out " +
                q(d / "hm")) == 0);
    CHECK(fs::exists(d / "hm" / "manifest.csv"));
    REQUIRE(run("spray --heatmaps " + q(d / "hm") + " --space warped --k-neighbors 5 --kmax 6 --out " + q(d / "sp")) ==
            0);
    CHECK(fs::exists(d / "sp" / "spectrum.bin"));
    CHECK(run("embed --spray " + q(d / "sp") + " --perplexity 4 --iterations 300 --out " + q(d / "em")) == 0);
    CHECK(fs::exists(d / "em" / "scatter.svg"));
    CHECK(run("embed --spray " + q(d / "sp") + " --perplexity 40 --out " + q(d / "em2")) == 2);
  }

  TEST_CASE("divergent training exits with 4") {
    const fs::path d = work();
    if (!fs::exists(d / "data" / "labels.csv"))
      REQUIRE(run("phantom --spec " + smoke() + " --n-per-class 10 --out " + q(d / "data")) == 0);
    std::ifstream in(smoke());
    std::stringstream ss;
    ss << in.rdbuf();
    std::string text = ss.str();
    text.replace(text.find("epochs = 3"), 10, "epochs = 3\nlr = 1e30");
    std::ofstream(d / "boom.toml") << text;
    CHECK(run("train --config " + q(d / "boom.toml") + " --variant A --data " + q(d / "data") + " --out " +
              q(d / "boom")) == 4);
  }
}
