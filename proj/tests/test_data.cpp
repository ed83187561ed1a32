#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <vector>

#include "birdgp/data.hpp"
#include "oracles.hpp"

using birdgp::BasisSet;
using birdgp::IdxData;
using birdgp::Matrix;
using birdgp::PairedDataset;
using birdgp::Rng;
using birdgp::VoxelGrid;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()),
            static_cast<std::streamsize>(b.size()));
}

BasisSet random_basis(std::size_t v, std::size_t k, std::uint64_t seed,
                      std::vector<double> eigenvalues) {
  Rng rng(seed);
  BasisSet basis = birdgp::orthonormalize(VoxelGrid::lattice_1d(v),
                                          Matrix::random_normal(v, k, rng),
                                          birdgp::OrthoStrategy::svd);
  basis.eigenvalues = std::move(eigenvalues);
  return basis;
}

// Labeled 28x28 source images, all zero except a unique identifying value at
// pixel 0; digit pools sized 10 ones, 5 twos, 5 threes.
IdxData tagged_source() {
  IdxData src;
  src.rows = 28;
  src.cols = 28;
  src.images = Matrix(20, 784);
  src.labels.resize(20);
  for (std::size_t i = 0; i < 20; ++i) {
    src.images(i, 0) = 0.003 * static_cast<double>(i + 1);
    src.labels[i] = i < 10 ? 1 : (i < 15 ? 2 : 3);
  }
  return src;
}

std::size_t source_index_from_tag(const IdxData& src, double tag) {
  for (std::size_t i = 0; i < src.images.rows(); ++i)
    if (src.images(i, 0) == tag) return i;
  FAIL("unknown source tag");
  return 0;
}

}  // namespace

TEST_CASE("idx loading parses the binary container") {
  // Hand-crafted minimal file: magic 0x803, n=1, 1x1, single pixel 255.
  const auto tiny = temp_file("birdgp_idx_tiny.idx");
  write_bytes(tiny, {0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 255});
  const IdxData one = birdgp::load_idx(tiny);
  REQUIRE(one.images.rows() == 1);
  REQUIRE(one.images.cols() == 1);
  REQUIRE(one.rows == 1);
  REQUIRE(one.cols == 1);
  REQUIRE(one.images(0, 0) == 1.0);
  REQUIRE(one.labels.empty());

  // Intensity scaling: byte 51 -> 0.2.
  const auto mid = temp_file("birdgp_idx_mid.idx");
  write_bytes(mid, {0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 2, 51, 0});
  const IdxData two = birdgp::load_idx(mid);
  REQUIRE(two.images(0, 0) == Catch::Approx(51.0 / 255.0).margin(1e-15));
  REQUIRE(two.images(0, 1) == 0.0);

  // Bad magic, truncation, zero dimensions, missing file.
  const auto bad = temp_file("birdgp_idx_bad.idx");
  write_bytes(bad, {0, 0, 9, 9, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 255});
  REQUIRE_THROWS_AS(birdgp::load_idx(bad), birdgp::FormatError);
  const auto trunc = temp_file("birdgp_idx_trunc.idx");
  write_bytes(trunc, {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 1, 255});
  REQUIRE_THROWS_AS(birdgp::load_idx(trunc), birdgp::FormatError);
  const auto zero = temp_file("birdgp_idx_zero.idx");
  write_bytes(zero, {0, 0, 8, 3, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 1});
  REQUIRE_THROWS_AS(birdgp::load_idx(zero), birdgp::FormatError);
  REQUIRE_THROWS_AS(birdgp::load_idx(temp_file("birdgp_missing.idx")),
                    birdgp::IoError);

  // Label files: magic check and count agreement.
  const auto lbl = temp_file("birdgp_idx_lbl.idx");
  write_bytes(lbl, {0, 0, 8, 1, 0, 0, 0, 1, 7});
  const IdxData labeled = birdgp::load_idx(tiny, lbl);
  REQUIRE(labeled.labels == std::vector<int>{7});
  const auto lbl2 = temp_file("birdgp_idx_lbl2.idx");
  write_bytes(lbl2, {0, 0, 8, 1, 0, 0, 0, 2, 7, 8});
  REQUIRE_THROWS_AS(birdgp::load_idx(tiny, lbl2), birdgp::FormatError);
  const auto lblbad = temp_file("birdgp_idx_lblbad.idx");
  write_bytes(lblbad, {0, 0, 8, 3, 0, 0, 0, 1, 7});
  REQUIRE_THROWS_AS(birdgp::load_idx(tiny, lblbad), birdgp::FormatError);
}

TEST_CASE("idx write and load round-trip") {
  // Values on the exact 1/255 lattice survive quantization bit-exactly.
  Rng rng(301);
  Matrix images(5, 12);
  for (double& e : images.storage())
    e = static_cast<double>(rng.uniform_int(0, 255)) / 255.0;
  const std::vector<int> labels{3, 1, 4, 1, 5};
  const auto ipath = temp_file("birdgp_idx_rt.idx");
  const auto lpath = temp_file("birdgp_idx_rt_labels.idx");
  birdgp::write_idx(ipath, images, 3, 4, lpath, labels);
  const IdxData back = birdgp::load_idx(ipath, lpath);
  REQUIRE(back.rows == 3);
  REQUIRE(back.cols == 4);
  REQUIRE(back.labels == labels);
  REQUIRE(back.images.storage() == images.storage());

  REQUIRE_THROWS_AS(birdgp::write_idx(ipath, images, 5, 5), birdgp::ShapeError);
  REQUIRE_THROWS_AS(
      birdgp::write_idx(ipath, images, 3, 4, lpath, std::vector<int>{1}),
      birdgp::ShapeError);
}

TEST_CASE("digit-arithmetic pairing composes panels and outcomes") {
  const IdxData src = tagged_source();
  Rng rng(302);
  const PairedDataset ds = birdgp::make_mnist_arithmetic(src, 4, rng);
  ds.validate();
  REQUIRE(ds.size() == 4);
  REQUIRE(ds.channels.size() == 1);
  REQUIRE(ds.channels[0].cols() == 28 * 84);
  REQUIRE(ds.outcomes.cols() == 784);

  const Matrix& stack = ds.channels[0];
  std::vector<double> used_twos, used_ones;
  for (std::size_t i = 0; i < 4; ++i) {
    // Identify the sampled digits from the tag pixel of each panel.
    const double tag2 = stack(i, 0);
    const double tag1 = stack(i, 56);
    const std::size_t idx2 = source_index_from_tag(src, tag2);
    const std::size_t idx1 = source_index_from_tag(src, tag1);
    REQUIRE(src.labels[idx2] == 2);
    REQUIRE(src.labels[idx1] == 1);
    used_twos.push_back(tag2);
    used_ones.push_back(tag1);

    // Outer panels are verbatim copies; the glyph never leaks outside the
    // middle panel.
    for (std::size_t r = 0; r < 28; ++r)
      for (std::size_t c = 0; c < 28; ++c) {
        REQUIRE(stack(i, r * 84 + c) == src.images(idx2, r * 28 + c));
        REQUIRE(stack(i, r * 84 + 56 + c) == src.images(idx1, r * 28 + c));
      }

    // Middle panel: binary glyph with mass present.
    std::size_t painted = 0;
    std::vector<std::uint8_t> row_hit(28, 0);
    for (std::size_t r = 0; r < 28; ++r)
      for (std::size_t c = 28; c < 56; ++c) {
        const double v = stack(i, r * 84 + c);
        REQUIRE((v == 0.0 || v == 1.0));
        if (v == 1.0) {
          ++painted;
          row_hit[r] = 1;
        }
      }
    REQUIRE(painted > 0);
    const std::size_t rows_painted =
        static_cast<std::size_t>(std::count(row_hit.begin(), row_hit.end(),
                                            std::uint8_t{1}));

    // Outcome label matches the sign: plus glyphs span many rows (vertical
    // bar length >= 12), minus glyphs at most the bar thickness (<= 4 rows).
    REQUIRE((ds.labels[i] == 1 || ds.labels[i] == 3));
    if (ds.labels[i] == 3) {
      REQUIRE(rows_painted >= 11);
    } else {
      REQUIRE(rows_painted <= 4);
    }

    // Outcome is a verbatim source image with the right label.
    const std::size_t idx_out = source_index_from_tag(src, ds.outcomes(i, 0));
    REQUIRE(src.labels[idx_out] == ds.labels[i]);
    for (std::size_t j = 0; j < 784; ++j)
      REQUIRE(ds.outcomes(i, j) == src.images(idx_out, j));
    if (ds.labels[i] == 1) used_ones.push_back(ds.outcomes(i, 0));
  }

  // Sampling without replacement within a dataset.
  std::sort(used_twos.begin(), used_twos.end());
  REQUIRE(std::adjacent_find(used_twos.begin(), used_twos.end()) == used_twos.end());
  std::sort(used_ones.begin(), used_ones.end());
  REQUIRE(std::adjacent_find(used_ones.begin(), used_ones.end()) == used_ones.end());

  // Replay: identical seeds give bitwise-identical datasets.
  Rng ra(303), rb(303);
  const PairedDataset da = birdgp::make_mnist_arithmetic(src, 3, ra);
  const PairedDataset db = birdgp::make_mnist_arithmetic(src, 3, rb);
  REQUIRE(da.channels[0].storage() == db.channels[0].storage());
  REQUIRE(da.outcomes.storage() == db.outcomes.storage());
  REQUIRE(da.labels == db.labels);

  // Pool exhaustion and malformed sources.
  Rng rc(304);
  REQUIRE_THROWS_AS(birdgp::make_mnist_arithmetic(src, 6, rc),
                    birdgp::InsufficientData);
  IdxData unlabeled = src;
  unlabeled.labels.clear();
  REQUIRE_THROWS_AS(birdgp::make_mnist_arithmetic(unlabeled, 1, rc),
                    birdgp::InvalidInput);
  IdxData small = src;
  small.rows = 14;
  REQUIRE_THROWS_AS(birdgp::make_mnist_arithmetic(small, 1, rc),
                    birdgp::InvalidInput);
}

TEST_CASE("quartile split bins nonzero intensities per image") {
  // One image whose four nonzero values land in four distinct panels.
  Matrix images(2, 784);
  images(0, 0 * 28 + 0) = 0.2;
  images(0, 5 * 28 + 7) = 0.4;
  images(0, 13 * 28 + 20) = 0.6;
  images(0, 27 * 28 + 27) = 0.8;
  // Second image stays all zero.
  std::vector<std::uint8_t> flags;
  const PairedDataset ds = birdgp::make_quartile_split(images, &flags);
  ds.validate();
  const Matrix& stack = ds.channels[0];
  REQUIRE(stack.cols() == 28 * 112);

  REQUIRE(stack(0, 0 * 112 + 0 * 28 + 0) == 0.2);
  REQUIRE(stack(0, 5 * 112 + 1 * 28 + 7) == 0.4);
  REQUIRE(stack(0, 13 * 112 + 2 * 28 + 20) == 0.6);
  REQUIRE(stack(0, 27 * 112 + 3 * 28 + 27) == 0.8);
  double mass = 0.0;
  for (std::size_t j = 0; j < stack.cols(); ++j) mass += stack(0, j);
  REQUIRE(mass == Catch::Approx(2.0).margin(1e-12));  // nothing duplicated

  for (std::size_t j = 0; j < stack.cols(); ++j) REQUIRE(stack(1, j) == 0.0);
  REQUIRE(ds.outcomes.storage() == images.storage());
  REQUIRE(flags == std::vector<std::uint8_t>{0, 1});  // 4 vs 0 distinct values

  // Random sparse images: panels partition the support, and the elementwise
  // max across re-aligned panels reconstructs the original exactly.
  Rng rng(305);
  Matrix sparse(6, 784);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 784; ++j)
      if (rng.uniform() < 0.25) sparse(i, j) = 0.1 + 0.9 * rng.uniform();
  const PairedDataset sp = birdgp::make_quartile_split(sparse);
  const Matrix& st = sp.channels[0];
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t r = 0; r < 28; ++r)
      for (std::size_t c = 0; c < 28; ++c) {
        double mx = 0.0;
        std::size_t nonzero_panels = 0;
        for (std::size_t k = 0; k < 4; ++k) {
          const double v = st(i, r * 112 + k * 28 + c);
          if (v != 0.0) ++nonzero_panels;
          mx = std::max(mx, v);
        }
        REQUIRE(nonzero_panels <= 1);
        REQUIRE(mx == sparse(i, r * 28 + c));
      }

  REQUIRE_THROWS_AS(birdgp::make_quartile_split(Matrix(2, 100)),
                    birdgp::InvalidInput);
}

TEST_CASE("scenario one is a linear gaussian map through the bases") {
  const BasisSet bx = random_basis(60, 8, 306, std::vector<double>(8, 1.0));
  const BasisSet by = random_basis(70, 6, 307, std::vector<double>(6, 1.0));
  birdgp::ScenarioSpec spec;
  spec.scenario = 1;
  spec.n = 4000;
  spec.k_x = 8;
  spec.k_y = 6;

  birdgp::ScenarioTruth truth;
  Rng rng(308);
  const PairedDataset ds = birdgp::simulate_scenario(spec, bx, by, rng, &truth);
  ds.validate();
  REQUIRE(truth.lambda_y == std::vector<double>(6, 1.0));
  REQUIRE(truth.b.rows() == 6);
  REQUIRE(truth.b.cols() == 8);

  // Images are exact basis reconstructions of the returned coefficients.
  const Matrix x_rec = birdgp::matmul_nt(truth.x_coefs, bx.psi);
  REQUIRE(birdgp::frobenius_norm(ds.channels[0] - x_rec) < 1e-10);
  const Matrix y_rec = birdgp::matmul_nt(truth.y_coefs, by.psi);
  REQUIRE(birdgp::frobenius_norm(ds.outcomes - y_rec) < 1e-10);

  // Conditional residuals y - Bx are standard normal and x-independent.
  const Matrix mean = birdgp::matmul_nt(truth.x_coefs, truth.b);
  for (std::size_t k = 0; k < 6; ++k) {
    std::vector<double> resid(spec.n);
    for (std::size_t i = 0; i < spec.n; ++i)
      resid[i] = truth.y_coefs(i, k) - mean(i, k);
    REQUIRE(birdgp::mean(resid) == Catch::Approx(0.0).margin(4.0 / 63.0));
    REQUIRE(birdgp::variance(resid) == Catch::Approx(1.0).epsilon(0.08));
    std::vector<double> xk(spec.n);
    for (std::size_t i = 0; i < spec.n; ++i) xk[i] = truth.x_coefs(i, k);
    REQUIRE(std::abs(oracles::pearson_ref(xk, resid)) < 4.0 / 63.0);
  }

  // Bivariate-normal algebra: corr(x_k, y_k) = B_kk / sqrt(sum_j B_kj^2 + 1).
  for (std::size_t k = 0; k < 6; ++k) {
    double denom = 1.0;
    for (std::size_t j = 0; j < 8; ++j) denom += truth.b(k, j) * truth.b(k, j);
    const double want = truth.b(k, k) / std::sqrt(denom);
    std::vector<double> xk(spec.n), yk(spec.n);
    for (std::size_t i = 0; i < spec.n; ++i) {
      xk[i] = truth.x_coefs(i, k);
      yk[i] = truth.y_coefs(i, k);
    }
    REQUIRE(oracles::pearson_ref(xk, yk) == Catch::Approx(want).margin(4.0 / 63.0));
  }

  // Column scales of B decay linearly from 1 to 0.05.
  Rng brng(309);
  const Matrix bigb = birdgp::scenario1_b(3000, 3, brng);
  for (std::size_t k = 0; k < 3; ++k) {
    std::vector<double> col(3000);
    for (std::size_t j = 0; j < 3000; ++j) col[j] = bigb(j, k);
    const double want_sd = 1.0 + (static_cast<double>(k) / 2.0) * (0.05 - 1.0);
    REQUIRE(std::sqrt(birdgp::variance(col)) ==
            Catch::Approx(want_sd).epsilon(0.07));
  }

  // Replays are bitwise identical.
  Rng ra(310), rb(310);
  birdgp::ScenarioSpec small = spec;
  small.n = 50;
  const PairedDataset da = birdgp::simulate_scenario(small, bx, by, ra);
  const PairedDataset db = birdgp::simulate_scenario(small, bx, by, rb);
  REQUIRE(da.channels[0].storage() == db.channels[0].storage());
  REQUIRE(da.outcomes.storage() == db.outcomes.storage());

  birdgp::ScenarioSpec bad = spec;
  bad.k_x = 9;
  Rng rc(311);
  REQUIRE_THROWS_AS(birdgp::simulate_scenario(bad, bx, by, rc),
                    birdgp::InvalidConfig);
  bad = spec;
  bad.scenario = 4;
  REQUIRE_THROWS_AS(birdgp::simulate_scenario(bad, bx, by, rc),
                    birdgp::InvalidConfig);
  bad = spec;
  bad.n = 0;
  REQUIRE_THROWS_AS(birdgp::simulate_scenario(bad, bx, by, rc),
                    birdgp::InvalidInput);
}

TEST_CASE("scenario two hits the target signal-to-noise ratio") {
  const BasisSet bx = random_basis(50, 6, 312, std::vector<double>(6, 1.0));
  const BasisSet by = random_basis(50, 4, 313, std::vector<double>(4, 1.0));
  birdgp::ScenarioSpec spec;
  spec.scenario = 2;
  spec.n = 5000;
  spec.k_x = 6;
  spec.k_y = 4;
  spec.snr = 0.5;

  birdgp::ScenarioTruth truth;
  Rng rng(314);
  birdgp::simulate_scenario(spec, bx, by, rng, &truth);
  REQUIRE(truth.net.has_value());
  REQUIRE(truth.net->arch.layer_sizes == std::vector<std::size_t>{6, 32, 4});

  // Per-dimension: Var over subjects of the conditional mean divided by
  // lambda equals the target exactly (lambda is calibrated on the sample),
  // and the realized residual variance matches lambda within MC error.
  const Matrix mean = birdgp::forward(*truth.net, truth.x_coefs);
  for (std::size_t k = 0; k < 4; ++k) {
    std::vector<double> mcol(spec.n), resid(spec.n);
    for (std::size_t i = 0; i < spec.n; ++i) {
      mcol[i] = mean(i, k);
      resid[i] = truth.y_coefs(i, k) - mean(i, k);
    }
    REQUIRE(birdgp::variance(mcol) / truth.lambda_y[k] ==
            Catch::Approx(spec.snr).epsilon(1e-10));
    REQUIRE(birdgp::variance(resid) / truth.lambda_y[k] ==
            Catch::Approx(1.0).epsilon(0.05));
  }
}

TEST_CASE("scenario three is a voxelwise linear model") {
  const BasisSet basis = random_basis(50, 5, 315, {5.0, 4.0, 3.0, 2.0, 1.0});
  birdgp::ScenarioSpec spec;
  spec.scenario = 3;
  spec.n = 3000;

  birdgp::ScenarioTruth truth;
  Rng rng(316);
  const PairedDataset ds = birdgp::simulate_scenario(spec, basis, basis, rng, &truth);
  ds.validate();
  REQUIRE(truth.beta0.size() == 50);
  REQUIRE(truth.beta1.size() == 50);

  // Residuals after subtracting the known linear law are standard normal.
  const Matrix& x = ds.channels[0];
  for (std::size_t j = 0; j < 50; j += 9) {
    std::vector<double> resid(spec.n);
    for (std::size_t i = 0; i < spec.n; ++i)
      resid[i] = ds.outcomes(i, j) - truth.beta0[j] - truth.beta1[j] * x(i, j);
    REQUIRE(birdgp::mean(resid) == Catch::Approx(0.0).margin(5.0 / 54.0));
    REQUIRE(birdgp::variance(resid) == Catch::Approx(1.0).epsilon(0.08));
  }

  // Eigenvalues are required to simulate predictor images.
  BasisSet no_eigs = basis;
  no_eigs.eigenvalues.clear();
  Rng rc(317);
  REQUIRE_THROWS_AS(birdgp::simulate_scenario(spec, no_eigs, no_eigs, rc),
                    birdgp::InvalidState);
}

TEST_CASE("voxelwise regression baseline recovers the generating law") {
  const BasisSet basis = random_basis(50, 5, 318, {5.0, 4.0, 3.0, 2.0, 1.0});
  birdgp::ScenarioSpec spec;
  spec.scenario = 3;
  spec.n = 3000;
  birdgp::ScenarioTruth truth;
  Rng rng(319);
  const PairedDataset ds = birdgp::simulate_scenario(spec, basis, basis, rng, &truth);

  const birdgp::VrModel vr = birdgp::baseline_vr(ds.channels[0], ds.outcomes);
  REQUIRE(oracles::pearson_ref(vr.slope, truth.beta1) > 0.98);
  double worst = 0.0;
  for (std::size_t j = 0; j < 50; ++j)
    worst = std::max(worst, std::abs(vr.slope[j] - truth.beta1[j]));
  REQUIRE(worst < 0.2);

  // Held-out prediction error approaches the unit noise floor.
  Matrix test_coefs;
  Rng trng(320);
  const Matrix x_test = birdgp::simulate_images(basis, 500, 0.0, trng, &test_coefs);
  Matrix y_test(500, 50);
  for (std::size_t i = 0; i < 500; ++i)
    for (std::size_t j = 0; j < 50; ++j)
      y_test(i, j) =
          truth.beta0[j] + truth.beta1[j] * x_test(i, j) + trng.normal();
  const Matrix pred = birdgp::vr_predict(vr, x_test);
  double sse = 0.0;
  for (std::size_t i = 0; i < 500; ++i)
    for (std::size_t j = 0; j < 50; ++j) {
      const double d = pred(i, j) - y_test(i, j);
      sse += d * d;
    }
  REQUIRE(sse / (500.0 * 50.0) == Catch::Approx(1.0).epsilon(0.1));

  // Exact recovery with covariates on noiseless data.
  Rng crng(321);
  const Matrix xs = Matrix::random_normal(50, 3, crng);
  const Matrix cov = Matrix::random_normal(50, 1, crng);
  Matrix ys(50, 3);
  for (std::size_t i = 0; i < 50; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      ys(i, j) = 2.0 + 3.0 * xs(i, j) + 4.0 * cov(i, 0);
  const birdgp::VrModel exact = birdgp::baseline_vr(xs, ys, cov);
  for (std::size_t j = 0; j < 3; ++j) {
    REQUIRE(exact.intercept[j] == Catch::Approx(2.0).margin(1e-8));
    REQUIRE(exact.slope[j] == Catch::Approx(3.0).margin(1e-8));
    REQUIRE(exact.covar_slopes(j, 0) == Catch::Approx(4.0).margin(1e-8));
  }
  const Matrix yhat = birdgp::vr_predict(exact, xs, cov);
  REQUIRE(birdgp::max_abs(yhat - ys) < 1e-7);

  // Constant predictor voxels fall back to intercept-only fits.
  Matrix xc = xs;
  for (std::size_t i = 0; i < 50; ++i) xc(i, 1) = 3.0;
  Matrix yc(50, 3);
  for (std::size_t i = 0; i < 50; ++i)
    for (std::size_t j = 0; j < 3; ++j) yc(i, j) = 0.5 * xc(i, j) + 0.1;
  const birdgp::VrModel degen = birdgp::baseline_vr(xc, yc);
  REQUIRE(degen.slope[1] == 0.0);
  std::vector<double> col1(50);
  for (std::size_t i = 0; i < 50; ++i) col1[i] = yc(i, 1);
  REQUIRE(degen.intercept[1] == Catch::Approx(birdgp::mean(col1)).margin(1e-10));
  REQUIRE(degen.slope[0] == Catch::Approx(0.5).margin(1e-8));

  REQUIRE_THROWS_AS(birdgp::baseline_vr(xs, Matrix(50, 4)), birdgp::GridMismatch);
  REQUIRE_THROWS_AS(birdgp::baseline_vr(xs, Matrix(49, 3)), birdgp::ShapeError);
  REQUIRE_THROWS_AS(birdgp::baseline_vr(Matrix(2, 3), Matrix(2, 3),
                                        Matrix::random_normal(2, 1, crng)),
                    birdgp::InsufficientData);
  REQUIRE_THROWS_AS(birdgp::vr_predict(exact, Matrix(5, 4)), birdgp::ShapeError);
}

TEST_CASE("region-linear baseline averages per-subject parcel fits") {
  // One parcel covering the grid with an exact shared linear law reduces to
  // a single regression.
  Rng rng(322);
  const Matrix x = Matrix::random_normal(12, 30, rng);
  Matrix y(12, 30);
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t j = 0; j < 30; ++j) y(i, j) = 2.0 + 3.0 * x(i, j);
  const std::vector<int> one_parcel(30, 5);
  const birdgp::LrModel lr = birdgp::baseline_lr(x, y, one_parcel);
  REQUIRE(lr.intercept.at(5) == Catch::Approx(2.0).margin(1e-10));
  REQUIRE(lr.slope.at(5) == Catch::Approx(3.0).margin(1e-10));
  const Matrix pred = birdgp::lr_predict(lr, x);
  REQUIRE(birdgp::max_abs(pred - y) < 1e-9);

  // Two parcels with different laws recovered separately.
  std::vector<int> parcels(30, 0);
  for (std::size_t j = 15; j < 30; ++j) parcels[j] = 1;
  Matrix y2(12, 30);
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t j = 0; j < 30; ++j)
      y2(i, j) = j < 15 ? (1.0 - 2.0 * x(i, j)) : (4.0 + 0.5 * x(i, j));
  const birdgp::LrModel lr2 = birdgp::baseline_lr(x, y2, parcels);
  REQUIRE(lr2.intercept.at(0) == Catch::Approx(1.0).margin(1e-10));
  REQUIRE(lr2.slope.at(0) == Catch::Approx(-2.0).margin(1e-10));
  REQUIRE(lr2.intercept.at(1) == Catch::Approx(4.0).margin(1e-10));
  REQUIRE(lr2.slope.at(1) == Catch::Approx(0.5).margin(1e-10));

  // Constant predictor within a parcel: slope 0, intercept = mean outcome.
  Matrix xflat(4, 6, 2.0);
  Matrix yflat(4, 6);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 6; ++j) yflat(i, j) = static_cast<double>(i);
  const birdgp::LrModel lr3 = birdgp::baseline_lr(xflat, yflat,
                                                  std::vector<int>(6, 0));
  REQUIRE(lr3.slope.at(0) == 0.0);
  REQUIRE(lr3.intercept.at(0) == Catch::Approx(1.5).margin(1e-12));

  REQUIRE_THROWS_AS(birdgp::baseline_lr(x, Matrix(12, 29), one_parcel),
                    birdgp::GridMismatch);
  REQUIRE_THROWS_AS(birdgp::baseline_lr(x, y, std::vector<int>(29, 0)),
                    birdgp::ShapeError);
  REQUIRE_THROWS_AS(birdgp::lr_predict(lr, Matrix(2, 29)), birdgp::ShapeError);
}

TEST_CASE("substitute classifier separates linearly separable classes") {
  // Two classes distinguished by which of two pixels is bright.
  Rng rng(323);
  const std::size_t n = 200, v = 20;
  Matrix images(n, v);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const bool a = i % 2 == 0;
    labels[i] = a ? 1 : 3;
    for (std::size_t j = 0; j < v; ++j) images(i, j) = 0.05 * rng.uniform();
    images(i, a ? 3 : 7) = 0.8 + 0.1 * rng.uniform();
  }
  const birdgp::LogisticClassifier clf = birdgp::train_classifier(images, labels);
  const std::vector<int> pred = birdgp::classify(clf, images);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (pred[i] == labels[i]) ++hits;
  REQUIRE(static_cast<double>(hits) / static_cast<double>(n) >= 0.99);

  // Fresh draws from the same law classify correctly too.
  Matrix test(60, v);
  std::vector<int> test_labels(60);
  for (std::size_t i = 0; i < 60; ++i) {
    const bool a = i % 3 != 0;
    test_labels[i] = a ? 1 : 3;
    for (std::size_t j = 0; j < v; ++j) test(i, j) = 0.05 * rng.uniform();
    test(i, a ? 3 : 7) = 0.8 + 0.1 * rng.uniform();
  }
  const std::vector<int> tpred = birdgp::classify(clf, test);
  std::size_t thits = 0;
  for (std::size_t i = 0; i < 60; ++i)
    if (tpred[i] == test_labels[i]) ++thits;
  REQUIRE(static_cast<double>(thits) / 60.0 >= 0.95);

  // Deterministic training.
  const birdgp::LogisticClassifier again = birdgp::train_classifier(images, labels);
  REQUIRE(again.w.storage() == clf.w.storage());
  REQUIRE(again.bias == clf.bias);

  // Relabeling the classes permutes the predictions consistently.
  std::vector<int> swapped(n);
  for (std::size_t i = 0; i < n; ++i) swapped[i] = labels[i] == 1 ? 3 : 1;
  const birdgp::LogisticClassifier sclf = birdgp::train_classifier(images, swapped);
  const std::vector<int> spred = birdgp::classify(sclf, test);
  for (std::size_t i = 0; i < 60; ++i)
    REQUIRE(spred[i] == (tpred[i] == 1 ? 3 : 1));

  REQUIRE_THROWS_AS(birdgp::train_classifier(images, std::vector<int>(n, 1)),
                    birdgp::InvalidInput);
  REQUIRE_THROWS_AS(birdgp::train_classifier(images, std::vector<int>{1, 3}),
                    birdgp::ShapeError);
  REQUIRE_THROWS_AS(birdgp::classify(clf, Matrix(2, v + 1)), birdgp::ShapeError);
}
