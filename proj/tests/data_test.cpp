#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <map>

#include "decorr/data.hpp"
#include "support.hpp"

using namespace decorr;
using testsupport::TempDir;

namespace {

void put_be32(std::ofstream& out, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) out.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void write_idx_images(const std::filesystem::path& path,
                      const std::vector<unsigned char>& pixels, std::uint32_t n,
                      std::uint32_t h, std::uint32_t w,
                      std::uint32_t magic = 0x00000803u, bool truncate = false) {
  std::ofstream out(path, std::ios::binary);
  put_be32(out, magic);
  put_be32(out, n);
  put_be32(out, h);
  put_be32(out, w);
  const std::size_t count = truncate ? pixels.size() / 2 : pixels.size();
  out.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(count));
}

void write_idx_labels(const std::filesystem::path& path,
                      const std::vector<unsigned char>& labels,
                      std::uint32_t magic = 0x00000801u) {
  std::ofstream out(path, std::ios::binary);
  put_be32(out, magic);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()),
            static_cast<std::streamsize>(labels.size()));
}

void write_cifar(const std::filesystem::path& path,
                 const std::vector<unsigned char>& records) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(records.data()),
            static_cast<std::streamsize>(records.size()));
}

// Index-coded dataset: every pixel of sample i holds the value i, so batch
// contents can be traced back to their source rows.
Dataset indexed_dataset(std::size_t n) {
  std::vector<double> data(n * 1 * 2 * 2);
  std::vector<int> labels(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t s = 0; s < 4; ++s) data[i * 4 + s] = double(i);
  }
  Dataset ds;
  ds.images = Tensor::from_data({n, 1, 2, 2}, std::move(data));
  ds.labels = std::move(labels);
  ds.class_count = 2;
  return ds;
}

}  // namespace

TEST_CASE("load_idx parses well-formed pairs and rejects bad ones") {
  TempDir tmp("idx");
  const std::uint32_t n = 6, h = 5, w = 4;
  std::vector<unsigned char> pixels(n * h * w);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    pixels[i] = static_cast<unsigned char>((i * 37) % 256);
  }
  std::vector<unsigned char> labels{0, 1, 2, 1, 0, 2};
  const auto img_path = tmp.path() / "imgs";
  const auto lbl_path = tmp.path() / "lbls";
  write_idx_images(img_path, pixels, n, h, w);
  write_idx_labels(lbl_path, labels);

  SUBCASE("shapes, counts and header-derived sizes") {
    Dataset ds = load_idx(img_path, lbl_path);
    CHECK(ds.images.shape() == Shape{6, 1, 5, 4});
    CHECK(ds.size() == 6);
    CHECK(ds.class_count == 3);
    CHECK(ds.labels == std::vector<int>{0, 1, 2, 1, 0, 2});
  }
  SUBCASE("limit keeps the first examples") {
    Dataset ds = load_idx(img_path, lbl_path, nullptr, 4);
    CHECK(ds.size() == 4);
    CHECK(ds.labels == std::vector<int>{0, 1, 2, 1});
  }
  SUBCASE("count mismatch between images and labels") {
    write_idx_labels(lbl_path, {0, 1, 2});
    CHECK_THROWS_AS(load_idx(img_path, lbl_path), DataError);
  }
  SUBCASE("zero-length file is a truncation error") {
    std::ofstream(tmp.path() / "empty").close();
    CHECK_THROWS_AS(load_idx(tmp.path() / "empty", lbl_path), DataError);
  }
  SUBCASE("bad magic") {
    write_idx_images(img_path, pixels, n, h, w, 0x00000805u);
    CHECK_THROWS_AS(load_idx(img_path, lbl_path), DataError);
  }
  SUBCASE("truncated pixel payload") {
    write_idx_images(img_path, pixels, n, h, w, 0x00000803u, true);
    CHECK_THROWS_AS(load_idx(img_path, lbl_path), DataError);
  }
}

TEST_CASE("load_cifar10 record framing") {
  TempDir tmp("cifar");
  const auto path = tmp.path() / "batch.bin";

  SUBCASE("a single 3073-byte record loads as one image") {
    std::vector<unsigned char> rec(3073, 0);
    rec[0] = 7;           // label
    rec[1] = 255;         // R plane, first pixel
    rec[1 + 1024] = 128;  // G plane, first pixel
    rec[1 + 2048] = 64;   // B plane, first pixel
    write_cifar(path, rec);
    Dataset ds = load_cifar10({path});
    CHECK(ds.size() == 1);
    CHECK(ds.images.shape() == Shape{1, 3, 32, 32});
    CHECK(ds.labels == std::vector<int>{7});
    CHECK(ds.class_count == 10);
  }
  SUBCASE("several records and several files concatenate") {
    std::vector<unsigned char> recs(3073 * 3, 0);
    recs[0] = 1;
    recs[3073] = 2;
    recs[2 * 3073] = 3;
    write_cifar(path, recs);
    const auto path2 = tmp.path() / "batch2.bin";
    std::vector<unsigned char> rec2(3073, 0);
    rec2[0] = 9;
    write_cifar(path2, rec2);
    Dataset ds = load_cifar10({path, path2});
    CHECK(ds.size() == 4);
    CHECK(ds.labels == std::vector<int>{1, 2, 3, 9});
  }
  SUBCASE("a 3072-byte file is a framing error") {
    write_cifar(path, std::vector<unsigned char>(3072, 0));
    CHECK_THROWS_AS(load_cifar10({path}), DataError);
  }
  SUBCASE("label bytes above 9 are rejected") {
    std::vector<unsigned char> rec(3073, 0);
    rec[0] = 10;
    write_cifar(path, rec);
    CHECK_THROWS_AS(load_cifar10({path}), DataError);
  }
}

TEST_CASE("synthetic dataset contracts") {
  Dataset ds = synthetic_dataset(4, 100, 7);
  CHECK(ds.size() == 400);
  CHECK(ds.class_count == 4);
  CHECK(ds.images.shape() == Shape{400, 3, 16, 16});

  SUBCASE("deterministic in the seed") {
    Dataset again = synthetic_dataset(4, 100, 7);
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
      CHECK(ds.images.values()[i] == again.images.values()[i]);
    }
    Dataset other_seed = synthetic_dataset(4, 100, 8);
    bool differs = false;
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
      if (ds.images.values()[i] != other_seed.images.values()[i]) differs = true;
    }
    CHECK(differs);
  }
  SUBCASE("streams share structure but differ in samples") {
    Dataset test = synthetic_dataset(4, 100, 7, 1, &ds.stats);
    bool differs = false;
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
      if (ds.images.values()[i] != test.images.values()[i]) differs = true;
    }
    CHECK(differs);
  }
  SUBCASE("classes below 2 are rejected") {
    CHECK_THROWS_AS(synthetic_dataset(1, 10, 0), ValueError);
  }
}

TEST_CASE("multinomial regression on flattened pixels separates the blobs") {
  // Plain softmax regression, full-batch gradient descent; an independent
  // check that the generator's classes are linearly separable.
  Dataset train = synthetic_dataset(4, 200, 7);
  Dataset test = synthetic_dataset(4, 100, 7, 1, &train.stats);
  const std::size_t dim = 3 * 16 * 16;
  const std::size_t classes = 4;
  std::vector<double> weights(classes * (dim + 1), 0.0);

  const auto x = train.images.values();
  const std::size_t n = train.size();
  for (int iter = 0; iter < 150; ++iter) {
    std::vector<double> grad(weights.size(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double scores[4];
      double mx = -1e300;
      for (std::size_t c = 0; c < classes; ++c) {
        double s = weights[c * (dim + 1) + dim];
        for (std::size_t j = 0; j < dim; ++j) {
          s += weights[c * (dim + 1) + j] * x[i * dim + j];
        }
        scores[c] = s;
        mx = std::max(mx, s);
      }
      double z = 0.0;
      for (std::size_t c = 0; c < classes; ++c) z += std::exp(scores[c] - mx);
      for (std::size_t c = 0; c < classes; ++c) {
        const double p = std::exp(scores[c] - mx) / z;
        const double err = p - (train.labels[i] == int(c) ? 1.0 : 0.0);
        for (std::size_t j = 0; j < dim; ++j) {
          grad[c * (dim + 1) + j] += err * x[i * dim + j];
        }
        grad[c * (dim + 1) + dim] += err;
      }
    }
    for (std::size_t k = 0; k < weights.size(); ++k) {
      weights[k] -= 0.5 * grad[k] / double(n);
    }
  }

  const auto tx = test.images.values();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    double best = -1e300;
    std::size_t arg = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      double s = weights[c * (dim + 1) + dim];
      for (std::size_t j = 0; j < dim; ++j) {
        s += weights[c * (dim + 1) + j] * tx[i * dim + j];
      }
      if (s > best) {
        best = s;
        arg = c;
      }
    }
    if (int(arg) == test.labels[i]) ++correct;
  }
  const double accuracy = double(correct) / double(test.size());
  CHECK(accuracy >= 0.90);
}

TEST_CASE("standardization statistics") {
  Dataset ds = synthetic_dataset(3, 120, 5);
  const auto v = ds.images.values();
  const std::size_t hw = 16 * 16, n = ds.size();
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t s = 0; s < hw; ++s) mean += v[(i * 3 + c) * hw + s];
    }
    mean /= double(n * hw);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t s = 0; s < hw; ++s) {
        const double d = v[(i * 3 + c) * hw + s] - mean;
        var += d * d;
      }
    }
    var /= double(n * hw);
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
  // A second split standardized with the training stats is generally not
  // centered at exactly zero, but must reuse the same statistics verbatim.
  Dataset test = synthetic_dataset(3, 40, 5, 1, &ds.stats);
  CHECK(test.stats.mean == ds.stats.mean);
  CHECK(test.stats.stddev == ds.stats.stddev);
}

TEST_CASE("batch iteration covers every retained sample exactly once") {
  Dataset ds = indexed_dataset(23);
  SUBCASE("drop_last drops the remainder") {
    BatchStream stream(ds, 5, 99, 0, {}, /*drop_last=*/true);
    CHECK(stream.batch_count() == 4);
    std::map<int, int> seen;
    std::size_t total = 0;
    for (auto b = stream.next(); b; b = stream.next()) {
      CHECK(b->labels.size() == 5);
      for (std::size_t i = 0; i < b->labels.size(); ++i) {
        seen[int(b->images.values()[i * 4])]++;
        ++total;
      }
    }
    CHECK(total == 20);
    for (const auto& [idx, count] : seen) CHECK(count == 1);
  }
  SUBCASE("evaluation keeps the short final batch in dataset order") {
    BatchStream stream(ds, 5, 99, 0, {}, /*drop_last=*/false, /*shuffled=*/false);
    CHECK(stream.batch_count() == 5);
    std::vector<int> order;
    for (auto b = stream.next(); b; b = stream.next()) {
      for (std::size_t i = 0; i < b->labels.size(); ++i) {
        order.push_back(int(b->images.values()[i * 4]));
      }
    }
    REQUIRE(order.size() == 23);
    for (int i = 0; i < 23; ++i) CHECK(order[i] == i);
  }
  SUBCASE("batch_size larger than the dataset is rejected") {
    CHECK_THROWS_AS(BatchStream(ds, 24, 0, 0, {}, true), ValueError);
  }
}

TEST_CASE("disabled policy yields exact slices in permuted order") {
  Dataset ds = synthetic_dataset(2, 20, 3);
  BatchStream stream(ds, 8, 42, 0, {}, true);
  const auto src = ds.images.values();
  std::vector<bool> used(ds.size(), false);
  for (auto b = stream.next(); b; b = stream.next()) {
    for (std::size_t i = 0; i < b->labels.size(); ++i) {
      // Identify the source row by exhaustive comparison.
      bool matched = false;
      for (std::size_t r = 0; r < ds.size(); ++r) {
        if (used[r]) continue;
        bool equal = true;
        for (std::size_t s = 0; s < 3 * 256; ++s) {
          if (b->images.values()[i * 3 * 256 + s] != src[r * 3 * 256 + s]) {
            equal = false;
            break;
          }
        }
        if (equal && ds.labels[r] == b->labels[i]) {
          used[r] = true;
          matched = true;
          break;
        }
      }
      CHECK(matched);
    }
  }
}

TEST_CASE("augmentation properties") {
  SUBCASE("reflect-pad and crop back to size leaves constant images unchanged") {
    const std::size_t n = 4;
    std::vector<double> data(n * 1 * 8 * 8, 3.25);
    Dataset ds;
    ds.images = Tensor::from_data({n, 1, 8, 8}, std::move(data));
    ds.labels = std::vector<int>(n, 0);
    ds.class_count = 2;
    AugmentationPolicy policy;
    policy.enabled = true;
    policy.pad_pixels = 4;
    policy.hflip_probability = 0.5;
    BatchStream stream(ds, n, 1, 0, policy, true);
    auto batch = stream.next();
    REQUIRE(batch);
    for (double v : batch->images.values()) CHECK(v == 3.25);
  }
  SUBCASE("horizontal flip is an involution") {
    Dataset ds = synthetic_dataset(2, 4, 9);
    AugmentationPolicy flip_only;
    flip_only.enabled = true;
    flip_only.pad_pixels = 0;
    flip_only.hflip_probability = 1.0;
    BatchStream stream(ds, ds.size(), 5, 0, flip_only, true, false);
    auto batch = stream.next();
    REQUIRE(batch);
    const auto flipped = batch->images.values();
    const auto orig = ds.images.values();
    const std::size_t hw = 16;
    for (std::size_t img = 0; img < ds.size(); ++img) {
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t y = 0; y < hw; ++y) {
          for (std::size_t x = 0; x < hw; ++x) {
            const std::size_t base = (img * 3 + c) * hw * hw + y * hw;
            CHECK(flipped[base + x] == orig[base + (hw - 1 - x)]);
          }
        }
      }
    }
  }
  SUBCASE("augmented epochs replay bit-identically") {
    Dataset ds = synthetic_dataset(2, 30, 13);
    AugmentationPolicy policy;
    policy.enabled = true;
    policy.pad_pixels = 4;
    policy.hflip_probability = 0.5;
    BatchStream a(ds, 16, 77, 3, policy, true);
    BatchStream b(ds, 16, 77, 3, policy, true);
    for (auto ba = a.next(), bb = b.next(); ba || bb;
         ba = a.next(), bb = b.next()) {
      REQUIRE(bool(ba) == bool(bb));
      if (!ba) break;
      CHECK(ba->labels == bb->labels);
      for (std::size_t i = 0; i < ba->images.size(); ++i) {
        CHECK(ba->images.values()[i] == bb->images.values()[i]);
      }
    }
    BatchStream c(ds, 16, 77, 4, policy, true);
    auto ba = BatchStream(ds, 16, 77, 3, policy, true).next();
    auto bc = c.next();
    bool differs = false;
    for (std::size_t i = 0; i < ba->images.size(); ++i) {
      if (ba->images.values()[i] != bc->images.values()[i]) differs = true;
    }
    CHECK(differs);  // a different epoch produces a different stream
  }
}
