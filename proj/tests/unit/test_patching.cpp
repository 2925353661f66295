#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "../common/oracles.hpp"
#include "dimae/errors.hpp"
#include "dimae/patching.hpp"

using namespace dimae;
using namespace dimae::patching;

TEST_SUITE("patching") {
  TEST_CASE("patch count and dimension") {
    const auto seq = patchify(ImageTensor(3, 32, 32, 0.1), 16);
    CHECK(seq.rows() == 4);
    CHECK(seq.patch_dim() == 3 * 256);
    CHECK(seq.grid_h == 2);
    CHECK(seq.grid_w == 2);
  }

  TEST_CASE("patch 0 is the top-left block flattened row-major") {
    ImageTensor img(1, 4, 4);
    for (int y = 0; y < 4; ++y) {
      for (int x = 0; x < 4; ++x) img.at(0, y, x) = 10 * y + x;
    }
    const auto seq = patchify(img, 2);
    const std::vector<double> p0(seq.patch(0).begin(), seq.patch(0).end());
    CHECK(p0 == std::vector<double>{0, 1, 10, 11});
    const std::vector<double> p1(seq.patch(1).begin(), seq.patch(1).end());
    CHECK(p1 == std::vector<double>{2, 3, 12, 13});
    const std::vector<double> p2(seq.patch(2).begin(), seq.patch(2).end());
    CHECK(p2 == std::vector<double>{20, 21, 30, 31});
  }

  TEST_CASE("channels are laid out channel-major inside a patch") {
    ImageTensor img(2, 2, 2);
    for (int c = 0; c < 2; ++c) {
      for (int i = 0; i < 4; ++i) img.data()[c * 4 + i] = c * 100 + i;
    }
    const auto seq = patchify(img, 2);
    const std::vector<double> p(seq.patch(0).begin(), seq.patch(0).end());
    CHECK(p == std::vector<double>{0, 1, 2, 3, 100, 101, 102, 103});
  }

  TEST_CASE("unpatchify inverts patchify exactly") {
    Rng rng(1);
    for (int p : {1, 2, 4, 8}) {
      const auto img = oracle::random_image(rng, 3, 16, 8);
      CHECK(unpatchify(patchify(img, p)) == img);
      CHECK(unpatchify(patchify(img, p), MaskPlan::full(16 * 8 / (p * p))) == img);
    }
  }

  TEST_CASE("indivisible sizes are rejected") {
    CHECK_THROWS_AS(patchify(ImageTensor(3, 30, 32), 4), ValidationError);
    CHECK_THROWS_AS(patchify(ImageTensor(3, 32, 30), 4), ValidationError);
    CHECK_THROWS_AS(patchify(ImageTensor(3, 32, 32), 0), ValidationError);
  }

  TEST_CASE("visible count is round(p * n)") {
    CHECK(sample_mask(196, 0.25, 1).visible_idx.size() == 49);
    CHECK(sample_mask(64, 0.25, 1).visible_idx.size() == 16);
    CHECK(sample_mask(10, 0.33, 1).visible_idx.size() == 3);
  }

  TEST_CASE("mask plans partition the grid") {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      const auto plan = sample_mask(64, 0.25, seed);
      CHECK(plan.num_patches == 64);
      CHECK(std::is_sorted(plan.visible_idx.begin(), plan.visible_idx.end()));
      CHECK(std::is_sorted(plan.masked_idx.begin(), plan.masked_idx.end()));
      std::vector<int> all = plan.visible_idx;
      all.insert(all.end(), plan.masked_idx.begin(), plan.masked_idx.end());
      std::sort(all.begin(), all.end());
      std::vector<int> expect(64);
      std::iota(expect.begin(), expect.end(), 0);
      CHECK(all == expect);
      std::set<int> kept(plan.permutation.begin(), plan.permutation.begin() + 16);
      CHECK(std::equal(kept.begin(), kept.end(), plan.visible_idx.begin()));
    }
  }

  TEST_CASE("same seed gives the same plan") {
    const auto a = sample_mask(64, 0.25, 42);
    const auto b = sample_mask(64, 0.25, 42);
    CHECK(a.visible_idx == b.visible_idx);
    CHECK(a.permutation == b.permutation);
    CHECK(sample_mask(64, 0.25, 43).permutation != a.permutation);
  }

  TEST_CASE("every index is visible with frequency p over many seeds") {
    std::vector<int> hits(16, 0);
    const int trials = 10000;
    for (int s = 0; s < trials; ++s) {
      for (int i : sample_mask(16, 0.25, static_cast<std::uint64_t>(s)).visible_idx) ++hits[i];
    }
    for (int h : hits) CHECK(std::abs(static_cast<double>(h) / trials - 0.25) <= 0.02);
  }

  TEST_CASE("degenerate visible counts are rejected") {
    CHECK_THROWS_AS(sample_mask(16, 0.01, 1), ValidationError);
    CHECK_THROWS_AS(sample_mask(16, 0.99, 1), ValidationError);
    CHECK_THROWS_AS(sample_mask(16, 0.0, 1), ValidationError);
    CHECK_THROWS_AS(sample_mask(16, 1.0, 1), ValidationError);
  }

  TEST_CASE("partial unpatchify fills masked positions") {
    Rng rng(2);
    const auto img = oracle::random_image(rng, 1, 8, 8);
    const auto all = patchify(img, 4);
    const auto plan = sample_mask(4, 0.5, 3);
    const auto vis = select(all, plan.visible_idx);
    const auto out = unpatchify(vis, plan);
    for (int pos = 0; pos < 4; ++pos) {
      const bool visible = std::find(plan.visible_idx.begin(), plan.visible_idx.end(), pos) != plan.visible_idx.end();
      const int y0 = (pos / 2) * 4, x0 = (pos % 2) * 4;
      CHECK(out.at(0, y0 + 1, x0 + 2) == (visible ? img.at(0, y0 + 1, x0 + 2) : kMaskedFill));
    }
    CHECK_THROWS_AS(unpatchify(all, plan), ValidationError);
  }

  TEST_CASE("select keeps the requested positions in order") {
    Rng rng(3);
    const auto all = patchify(oracle::random_image(rng, 2, 8, 8), 2);
    const std::vector<int> pick{5, 1, 9};
    const auto s = select(all, pick);
    CHECK(s.positions == pick);
    for (int r = 0; r < 3; ++r) CHECK(std::equal(s.patch(r).begin(), s.patch(r).end(), all.patch(pick[r]).begin()));
    const std::vector<int> bad{99};
    CHECK_THROWS_AS(select(all, bad), ValidationError);
  }
}
