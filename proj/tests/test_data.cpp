#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>

#include "doctest.h"
#include "pnet/data.hpp"

using namespace pnet;

namespace {

std::vector<std::uint8_t> idx_bytes(std::uint32_t magic, std::vector<std::uint32_t> dims, std::vector<std::uint8_t> payload) {
  std::vector<std::uint8_t> b;
  const auto be = [&](std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
  };
  be(magic);
  for (auto d : dims) be(d);
  b.insert(b.end(), payload.begin(), payload.end());
  return b;
}

IdxError::Code code_of(std::span<const std::uint8_t> bytes) {
  try {
    parse_idx(bytes);
  } catch (const IdxError& e) {
    return e.code();
  }
  FAIL("expected IdxError");
  return IdxError::Code::kMismatch;
}

ImageDataset ramp_images(std::size_t n, std::size_t side) {
  ImageDataset d;
  d.height = d.width = side;
  d.images = Tensor({n, side * side});
  d.labels.assign(n, 0);
  for (std::size_t e = 0; e < n; ++e)
    for (std::size_t i = 0; i < side; ++i)
      for (std::size_t j = 0; j < side; ++j) d.images[e * side * side + i * side + j] = 0.2 + 0.02 * i + 0.015 * j;
  return d;
}

}  // namespace

TEST_CASE("gen_input_selection") {
  Rng rng(1);
  const std::size_t n = 100000;
  const TabularDataset d = gen_input_selection(n, rng);
  REQUIRE(d.features.shape() == Shape{n, 30});
  REQUIRE(d.labels.size() == n);
  std::vector<double> mean1(30), mean0(30);
  std::size_t n1 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    CHECK((d.labels[i] == 0 || d.labels[i] == 1));
    n1 += d.labels[i];
    for (std::size_t j = 0; j < 30; ++j) (d.labels[i] ? mean1 : mean0)[j] += d.features.at(i, j);
  }
  const double n0 = static_cast<double>(n - n1);
  CHECK(std::abs(static_cast<double>(n1) - n / 2.0) < 3 * std::sqrt(n * 0.25));
  // 3 sigma on the pooled informative and spurious means; per column 4 sigma
  // keeps the 60-column family from failing by chance.
  const double se1 = 1 / std::sqrt(static_cast<double>(n1)), se0 = 1 / std::sqrt(n0);
  double pooled_inf = 0, pooled_spur = 0;
  for (std::size_t j = 0; j < 30; ++j) {
    mean1[j] /= static_cast<double>(n1);
    mean0[j] /= n0;
    CHECK(std::abs(mean1[j] - (j < 15 ? 1.0 : 0.0)) < 4 * se1);
    CHECK(std::abs(mean0[j]) < 4 * se0);
    (j < 15 ? pooled_inf : pooled_spur) += mean1[j] / 15;
  }
  CHECK(std::abs(pooled_inf - 1) < 3 * se1 / std::sqrt(15.0));
  CHECK(std::abs(pooled_spur) < 3 * se1 / std::sqrt(15.0));
  // Spurious columns are uncorrelated with the label.
  const double py = static_cast<double>(n1) / n;
  for (std::size_t j = 15; j < 30; ++j) {
    double sx = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double x = d.features.at(i, j);
      sx += x;
      sxx += x * x;
      sxy += x * d.labels[i];
    }
    const double mx = sx / n, vx = sxx / n - mx * mx;
    const double cov = sxy / n - mx * py;
    CHECK(std::abs(cov / std::sqrt(vx * py * (1 - py))) < 0.02);
  }
  Rng a(7), b(7);
  CHECK(gen_input_selection(50, a).features == gen_input_selection(50, b).features);
  CHECK_THROWS_AS(gen_input_selection(0, rng), std::invalid_argument);
}

TEST_CASE("gen_glyphs") {
  Rng rng(2);
  const ImageDataset d = gen_glyphs(500, rng);
  d.validate();
  CHECK(d.height == 16);
  CHECK(d.width == 16);
  CHECK_FALSE(d.rotated());
  std::vector<int> counts(10);
  for (int y : d.labels) ++counts[static_cast<std::size_t>(y)];
  for (int c : counts) CHECK(c > 20);
  Rng a(3), b(3);
  CHECK(gen_glyphs(20, a).images == gen_glyphs(20, b).images);
}

TEST_CASE("parse_idx") {
  const auto bytes = idx_bytes(kIdxImages, {1, 2, 2}, {0, 128, 255, 0});
  const IdxFile f = parse_idx(bytes);
  CHECK(f.magic == kIdxImages);
  CHECK(f.dims == std::vector<std::uint32_t>{1, 2, 2});
  const IdxFile labels = parse_idx(idx_bytes(kIdxLabels, {1}, {7}));
  const ImageDataset img = idx_to_images(f, labels);
  CHECK(img.height == 2);
  CHECK(img.width == 2);
  CHECK(img.images[0] == 0.0);
  CHECK(img.images[1] == 128.0 / 255.0);
  CHECK(img.images[2] == 1.0);
  CHECK(img.images[3] == 0.0);
  CHECK(img.labels == std::vector<int>{7});

  SUBCASE("errors") {
    const auto bad_magic = idx_bytes(0x00000805, {1, 2, 2}, {0, 0, 0, 0});
    CHECK(code_of(bad_magic) == IdxError::Code::kUnsupportedMagic);
    CHECK_THROWS_WITH(parse_idx(bad_magic), doctest::Contains("unsupported magic"));
    const auto short_payload = idx_bytes(kIdxImages, {1, 2, 2}, {0, 0, 0});
    CHECK(code_of(short_payload) == IdxError::Code::kTruncated);
    CHECK_THROWS_WITH(parse_idx(short_payload), doctest::Contains("truncated"));
    CHECK(code_of(idx_bytes(kIdxImages, {0xFFFFFFFF, 0xFFFFFFFF, 0xFFFFFFFF}, {})) ==
          IdxError::Code::kExtentOverflow);
    CHECK(code_of(idx_bytes(kIdxImages, {1, 1, 1}, {1, 2})) == IdxError::Code::kTrailingBytes);
    const std::vector<std::uint8_t> tiny{0, 0, 8};
    CHECK(code_of(tiny) == IdxError::Code::kShortHeader);
    const IdxFile two_labels = parse_idx(idx_bytes(kIdxLabels, {2}, {1, 2}));
    CHECK_THROWS_AS(idx_to_images(f, two_labels), IdxError);
  }
  SUBCASE("round trip") {
    Rng rng(4);
    IdxFile g{kIdxImages, {3, 4, 5}, {}};
    for (int i = 0; i < 60; ++i) g.payload.push_back(static_cast<std::uint8_t>(rng.below(256)));
    const IdxFile back = parse_idx(serialize_idx(g));
    CHECK(back.magic == g.magic);
    CHECK(back.dims == g.dims);
    CHECK(back.payload == g.payload);
    CHECK(serialize_idx(back) == serialize_idx(g));
  }
  SUBCASE("from a file") {
    const std::string path = "test_data_tmp.idx";
    {
      std::ofstream out(path, std::ios::binary);
      out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }
    CHECK(read_idx(path).payload == f.payload);
    std::remove(path.c_str());
    CHECK_THROWS(read_idx("does/not/exist.idx"));
  }
}

TEST_CASE("rotation variants") {
  Rng rng(5);
  const ImageDataset base = gen_glyphs(10, rng);
  SUBCASE("angle 0 leaves images unchanged") {
    const std::vector<Real> zeros(10, 0.0);
    const ImageDataset r = rotate_by(base, zeros);
    CHECK(r.images == base.images);
    CHECK(r.rotated());
  }
  SUBCASE("alpha then -alpha is exact on a ramp inside the central disk") {
    const ImageDataset ramp = ramp_images(3, 15);
    const std::vector<Real> alpha{0.3, -1.1, 2.5}, minus{-0.3, 1.1, -2.5};
    const ImageDataset back = rotate_by(rotate_by(ramp, alpha), minus);
    const double c = 7;
    for (std::size_t e = 0; e < 3; ++e)
      for (std::size_t i = 0; i < 15; ++i)
        for (std::size_t j = 0; j < 15; ++j)
          if (std::hypot(i - c, j - c) < 3.5)
            CHECK(std::abs(back.images[e * 225 + i * 15 + j] - ramp.images[e * 225 + i * 15 + j]) < 1e-12);
  }
  SUBCASE("stored angles are uniform on [-pi, pi]") {
    const std::size_t n = 10000;
    Rng r(6);
    const ImageDataset many = rotate_fixed(ramp_images(n, 3), r);
    std::vector<Real> a = many.angles;
    std::sort(a.begin(), a.end());
    double ks = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double cdf = (a[i] + std::numbers::pi) / (2 * std::numbers::pi);
      ks = std::max({ks, std::abs(cdf - static_cast<double>(i) / n), std::abs(cdf - static_cast<double>(i + 1) / n)});
    }
    CHECK(ks < 1.63 / std::sqrt(static_cast<double>(n)));  // alpha = 0.01
    CHECK(a.front() >= -std::numbers::pi);
    CHECK(a.back() <= std::numbers::pi);
    many.validate();
  }
}

TEST_CASE("chunk_split") {
  Rng rng(8);
  TabularDataset d = gen_input_selection(1000, rng);
  for (std::size_t i = 0; i < 1000; ++i) d.features.at(i, 0) = static_cast<Real>(i);  // row id
  SUBCASE("sizes") {
    const std::vector<double> u{0.8, 0.1, 0.1};
    const ChunkedDataset c = chunk_split(d, u, rng);
    CHECK(c.offsets == std::vector<std::size_t>{0, 800, 900, 1000});
    const std::vector<double> eight(8, 0.125);
    const ChunkedDataset c8 = chunk_split(d, eight, rng);
    for (std::size_t k = 1; k <= 8; ++k) CHECK(c8.chunk_size(k) == 125);
    const std::vector<double> one{1.0};
    CHECK(chunk_split(d, one, rng).chunks() == 1);
  }
  SUBCASE("a shuffled split is a partition of the rows") {
    const std::vector<double> u{0.5, 0.3, 0.2};
    const ChunkedDataset c = chunk_split(d, u, rng, true);
    std::set<std::size_t> seen;
    for (std::size_t r = 0; r < 1000; ++r) {
      const auto id = static_cast<std::size_t>(c.features.at(r, 0));
      CHECK(seen.insert(id).second);
      CHECK(c.labels[r] == d.labels[id]);
      CHECK(c.features.at(r, 5) == d.features.at(id, 5));
    }
    CHECK(seen.size() == 1000);
    bool moved = false;
    for (std::size_t r = 0; r < 1000; ++r) moved |= c.features.at(r, 0) != static_cast<Real>(r);
    CHECK(moved);
  }
  SUBCASE("no shuffle keeps row order") {
    const std::vector<double> u{0.5, 0.5};
    const ChunkedDataset c = chunk_split(d, u, rng, false);
    CHECK(c.features == d.features);
  }
  SUBCASE("errors") {
    TabularDataset small = gen_input_selection(3, rng);
    const std::vector<double> u{0.9, 0.05, 0.05};
    CHECK_THROWS_AS(chunk_split(small, u, rng), std::invalid_argument);
    const std::vector<double> bad{0.5, 0.6};
    CHECK_THROWS_AS(chunk_split(d, bad, rng), std::invalid_argument);
  }
}
