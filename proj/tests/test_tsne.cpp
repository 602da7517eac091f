#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <regex>
#include <set>
#include <sstream>

#include "doctest.h"
#include "relspray/errors.hpp"
#include "relspray/tsne.hpp"

using namespace relspray;
namespace fs = std::filesystem;

namespace {

std::vector<double> two_blobs(int per, unsigned seed, std::vector<int>& truth) {
  std::mt19937 rng(seed);
  std::normal_distribution<double> n(0, 1);
  std::vector<double> x;
  truth.clear();
  for (int i = 0; i < 2 * per; ++i) {
    const int c = i % 2;
    for (int d = 0; d < 5; ++d) x.push_back(n(rng) + (c && d == 0 ? 10.0 : 0.0));
    truth.push_back(c);
  }
  return x;
}

TsneConfig quick(unsigned seed) {
  TsneConfig c;
  c.perplexity = 10;
  c.iterations = 500;
  c.exaggeration_iterations = 100;
  c.seed = seed;
  c.init = TsneInit::Random;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_SUITE("tsne") {
  TEST_CASE("perplexity search hits the target entropy") {
    std::vector<int> t;
    const auto x = two_blobs(30, 1, t);
    for (double perp : {5.0, 10.0, 15.0}) {
      TsneConfig c;
      c.perplexity = perp;
      const Affinities a = tsne_affinities(x, 60, 5, c);
      for (std::size_t i = 0; i < 60; ++i) {
        CHECK(std::abs(a.entropy_bits[i] - std::log2(perp)) < 1e-5);
        // Recompute the entropy of the row from the conditional probabilities.
        double h = 0, s = 0;
        for (std::size_t j = 0; j < 60; ++j) {
          const double p = a.conditional[i * 60 + j];
          s += p;
          if (p > 0) h -= p * std::log2(p);
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(std::abs(h - std::log2(perp)) < 1e-5);
      }
    }
  }

  TEST_CASE("joint affinities are symmetric and sum to one") {
    std::vector<int> t;
    const auto x = two_blobs(20, 2, t);
    const Affinities a = tsne_affinities(x, 40, 5, quick(0));
    double s = 0;
    for (std::size_t i = 0; i < 40; ++i) {
      CHECK(a.joint[i * 40 + i] == 0.0);
      for (std::size_t j = 0; j < 40; ++j) {
        CHECK(a.joint[i * 40 + j] == doctest::Approx(a.joint[j * 40 + i]).epsilon(1e-15));
        s += a.joint[i * 40 + j];
      }
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }

  TEST_CASE("KL is non-increasing after exaggeration") {
    std::vector<int> t;
    const auto x = two_blobs(25, 3, t);
    const auto c = quick(4);
    const Embedding2D e = tsne(x, 50, 5, c);
    REQUIRE(e.kl_trace.size() == static_cast<std::size_t>(c.iterations));
    for (std::size_t i = c.exaggeration_iterations + 1; i < e.kl_trace.size(); ++i)
      CHECK(e.kl_trace[i] <= e.kl_trace[i - 1]);
  }

  TEST_CASE("two blobs separate over five seeds") {
    for (unsigned seed = 0; seed < 5; ++seed) {
      std::vector<int> t;
      const auto x = two_blobs(25, 10 + seed, t);
      const Embedding2D e = tsne(x, 50, 5, quick(seed));
      CHECK(silhouette(e.y, 50, 2, t) > 0.5);
    }
  }

  TEST_CASE("same seed gives the same embedding") {
    std::vector<int> t;
    const auto x = two_blobs(15, 5, t);
    auto c = quick(7);
    c.perplexity = 5;
    const auto a = tsne(x, 30, 5, c);
    const auto b = tsne(x, 30, 5, c);
    CHECK(a.y == b.y);
    CHECK(a.kl_trace == b.kl_trace);
  }

  TEST_CASE("infeasible perplexity is a configuration error") {
    std::vector<int> t;
    const auto x = two_blobs(5, 6, t);
    TsneConfig c;
    c.perplexity = 30;
    CHECK_THROWS_AS(tsne(x, 10, 5, c), ConfigError);
    CHECK_THROWS_AS(c.validate(3), DataError);
  }

  TEST_CASE("scatter export") {
    std::vector<int> t;
    const auto x = two_blobs(10, 7, t);
    auto c = quick(1);
    c.perplexity = 5;
    const Embedding2D e = tsne(x, 20, 5, c);
    std::vector<SampleInfo> man;
    const Outcome outs[] = {Outcome::TP, Outcome::FP, Outcome::TN, Outcome::FN};
    for (int i = 0; i < 20; ++i)
      man.push_back({"scan-" + std::to_string(i), i % 2 ? ClassLabel::AD : ClassLabel::NC, outs[i % 4]});
    const fs::path d = fs::temp_directory_path() / "relspray_tsne_tests";
    fs::create_directories(d);
    export_scatter(e, man, t, d / "a.csv", d / "a.svg");
    export_scatter(e, man, t, d / "b.csv", d / "b.svg");
    const std::string csv = slurp(d / "a.csv");
    CHECK(csv == slurp(d / "b.csv"));
    CHECK(slurp(d / "a.svg") == slurp(d / "b.svg"));
    std::istringstream is(csv);
    std::string line;
    int rows = 0;
    std::getline(is, line);
    CHECK(line == "scan_id,x,y,cluster,group,outcome");
    while (std::getline(is, line)) ++rows;
    CHECK(rows == 20);
    const std::string svg = slurp(d / "a.svg");
    std::set<std::string> colours;
    const std::regex fill("fill=\"(#[0-9a-fA-F]{6})\"");
    for (auto it = std::sregex_iterator(svg.begin(), svg.end(), fill); it != std::sregex_iterator(); ++it)
      colours.insert((*it)[1]);
    colours.erase("#555555");  // legend shapes
    CHECK(colours.size() == 4);
  }

  TEST_CASE("real formatting") {
    CHECK(format_real(0.5) == "0.5");
    CHECK(format_real(1.0 / 3.0) == "0.333333333");
  }
}
