#include <doctest.h>

#include "support.hpp"
#include "vessel3d/error.hpp"
#include "vessel3d/pyramid.hpp"

using namespace vessel3d;

TEST_CASE("gaussian kernel sigma 1 radius 2") {
  const auto k = gaussian_kernel_1d(1.0, 2);
  REQUIRE(k.size() == 5);
  double sum = 0.0;
  for (double v : k) sum += v;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(k[0] == doctest::Approx(k[4]));
  CHECK(k[1] == doctest::Approx(k[3]));
  // 1 / (1 + 2 e^-0.5 + 2 e^-2)
  const double by_hand = 1.0 / (1.0 + 2.0 * 0.6065306597126334 + 2.0 * 0.1353352832366127);
  CHECK(k[2] == doctest::Approx(by_hand).epsilon(1e-12));
  CHECK(k[2] == doctest::Approx(0.4026).epsilon(1e-4));
}

TEST_CASE("gaussian kernel flat limit and errors") {
  const auto k = gaussian_kernel_1d(1e6, 1);
  for (double v : k) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-9));
  CHECK_THROWS_AS(gaussian_kernel_1d(0.0, 2), ValidationError);
  CHECK_THROWS_AS(gaussian_kernel_1d(1.0, 0), ValidationError);
}

TEST_CASE("smoothing: constants, identity kernel, impulse response") {
  const Volume3 c = Volume3::constant({5, 4, 3}, 2.5f);
  const auto k = gaussian_kernel_1d(1.0, 2);
  const Volume3 sc = smooth_separable(c, k);
  for (float v : sc.data()) CHECK(v == doctest::Approx(2.5f));

  std::mt19937_64 rng(1);
  const Volume3 r = testsupport::random_volume({4, 5, 6}, rng);
  const std::vector<double> id{1.0};
  const Volume3 same = smooth_separable(r, id);
  CHECK(std::equal(same.data().begin(), same.data().end(), r.data().begin()));

  std::vector<float> imp(343, 0.0f);
  imp[(3 * 7 + 3) * 7 + 3] = 1.0f;
  const Volume3 out = smooth_separable(Volume3({7, 7, 7}, imp), k);
  for (int z = 0; z < 7; ++z)
    for (int y = 0; y < 7; ++y)
      for (int x = 0; x < 7; ++x) {
        const auto w = [&](int i) { return std::abs(i - 3) <= 2 ? k[i - 3 + 2] : 0.0; };
        CHECK(out.at({std::size_t(x), std::size_t(y), std::size_t(z)}) ==
              doctest::Approx(w(x) * w(y) * w(z)).epsilon(1e-6));
      }
}

TEST_CASE("smoothing matches dense 3D convolution on random volumes") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    std::uniform_int_distribution<std::size_t> dim(1, 8);
    const Volume3 v = testsupport::random_volume({dim(rng), dim(rng), dim(rng)}, rng);
    const auto k = gaussian_kernel_1d(0.5 + trial * 0.2, 1 + trial % 3);
    const auto expect = testsupport::dense_smooth(v, k);
    const Volume3 got = smooth_separable(v, k, 1 + trial % 3);
    for (std::size_t i = 0; i < expect.size(); ++i) CHECK(got.data()[i] == doctest::Approx(expect[i]).epsilon(1e-5));
  }
}

TEST_CASE("subsample dims are ceilings and masks follow their source voxel") {
  std::vector<std::uint8_t> mask(5 * 4 * 3, 0);
  for (std::size_t i = 0; i < mask.size(); i += 2) mask[i] = 1;
  const Volume3 v(Dims{5, 4, 3}, std::vector<float>(60, 1.0f), mask);
  const Volume3 s = subsample(v, 2);
  CHECK(s.dims() == Dims{3, 2, 2});
  for (std::size_t z = 0; z < 2; ++z)
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t x = 0; x < 3; ++x)
        CHECK(s.in_mask(s.index(x, y, z)) == v.in_mask(v.index(2 * x, 2 * y, 2 * z)));
}

TEST_CASE("pyramid levels") {
  const Volume3 c = Volume3::constant({9, 9, 9}, -1.0f);
  const GaussianPyramid one(c, 1, {});
  REQUIRE(one.num_levels() == 1);
  CHECK(one.level(0).dims() == c.dims());
  const GaussianPyramid three(c, 3, {});
  CHECK(three.level(1).dims() == Dims{5, 5, 5});
  CHECK(three.level(2).dims() == Dims{3, 3, 3});
  CHECK(three.stride(2) == 4);
  for (const auto& lvl : three.levels())
    for (float v : lvl.data()) CHECK(v == doctest::Approx(-1.0f));
  CHECK_THROWS_AS(GaussianPyramid(c, 0, {}), ValidationError);
}

TEST_CASE("two-level pyramid of a 512 cube") {
  const GaussianPyramid p(Volume3::constant({512, 512, 512}, 0.0f), 2, {}, 0);
  CHECK(p.level(0).dims() == Dims{512, 512, 512});
  CHECK(p.level(1).dims() == Dims{256, 256, 256});
}
