#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "afseg/spectral.hpp"
#include "spectral_fixtures.hpp"
#include "test_util.hpp"

using namespace afseg;
using namespace afseg::spectral;
using afseg::testing::random_tensor;

namespace {

Hypercolumn rows_to_hypercolumn(const Eigen::MatrixXd& f, Index gh, Index gw) {
  Hypercolumn hc;
  hc.features = f;
  for (Index i = 0; i < f.rows(); ++i) hc.features.row(i).normalize();
  hc.grid_h = gh;
  hc.grid_w = gw;
  hc.level_dims = {f.cols()};
  return hc;
}

double agreement(const Mask& a, const Mask& b) { return (a == b).cast<double>().mean(); }

Index overlap(const Mask& truth, const BBox& box) {
  Index n = 0;
  for (Index r = 0; r < truth.rows(); ++r)
    for (Index c = 0; c < truth.cols(); ++c)
      if (truth(r, c) && box.contains(r, c)) ++n;
  return n;
}

EigenSystem bare_system(std::initializer_list<double> values, const Eigen::MatrixXd& vectors) {
  EigenSystem es;
  es.values = Eigen::VectorXd(Index(values.size()));
  Index i = 0;
  for (double v : values) es.values[i++] = v;
  es.vectors = vectors;
  return es;
}

}  // namespace

TEST_CASE("hypercolumn of a single level at the target size is the normalized features") {
  std::mt19937_64 rng(11);
  const TensorD level = random_tensor(Shape{1, 3, 4, 5}, rng);
  const Hypercolumn hc = build_hypercolumn(std::vector<TensorD>{level}, 4, 5);
  REQUIRE(hc.features.rows() == 20);
  REQUIRE(hc.features.cols() == 3);
  for (Index p = 0; p < 20; ++p) {
    Eigen::Vector3d f(level(0, 0, p / 5, p % 5), level(0, 1, p / 5, p % 5), level(0, 2, p / 5, p % 5));
    CHECK((hc.features.row(p).transpose() - f.normalized()).norm() < 1e-14);
  }
  CHECK(hc.zero_norm_rows == 0);
}

TEST_CASE("two identical levels duplicate each row") {
  std::mt19937_64 rng(12);
  const TensorD level = random_tensor(Shape{1, 2, 3, 3}, rng);
  const Hypercolumn hc = build_hypercolumn(std::vector<TensorD>{level, level}, 3, 3);
  REQUIRE(hc.level_dims == std::vector<Index>{2, 2});
  for (Index p = 0; p < 9; ++p) {
    CHECK(std::abs(hc.features.row(p).norm() - 1.0) < 1e-14);
    CHECK((hc.features.row(p).head(2) - hc.features.row(p).tail(2)).norm() == 0.0);
  }
}

TEST_CASE("random two-level hypercolumn rows have unit norm") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<TensorD> pyr{random_tensor(Shape{1, 4, 8, 8}, rng), random_tensor(Shape{1, 6, 4, 4}, rng)};
    const Hypercolumn hc = build_hypercolumn(pyr, 6, 6);
    CHECK(hc.features.rows() == hc.grid_h * hc.grid_w);
    CHECK(hc.features.cols() == 10);
    for (Index p = 0; p < hc.features.rows(); ++p) CHECK(std::abs(hc.features.row(p).norm() - 1.0) < 1e-6);
  }
}

TEST_CASE("zero-norm pixels stay zero and are counted") {
  TensorD level(Shape{1, 2, 2, 2});
  level(0, 0, 0, 0) = 3;
  level(0, 1, 0, 0) = 4;
  const Hypercolumn hc = build_hypercolumn(std::vector<TensorD>{level}, 2, 2);
  CHECK(hc.zero_norm_rows == 3);
  CHECK(hc.features(0, 0) == doctest::Approx(0.6));
  CHECK(hc.features.row(3).norm() == 0.0);
}

TEST_CASE("affinity: identical, anti-correlated and random features") {
  Eigen::MatrixXd f(3, 2);
  f << 1, 2, 1, 2, -1, -2;
  const AffinityMatrix a = affinity_matrix(rows_to_hypercolumn(f, 1, 3));
  CHECK(a.w(0, 1) == doctest::Approx(1.0));
  CHECK(a.w(0, 2) == 0.0);
  CHECK(a.w(1, 2) == 0.0);

  std::mt19937_64 rng(14);
  std::normal_distribution<double> n01;
  Eigen::MatrixXd r(30, 5);
  for (Index i = 0; i < r.size(); ++i) r.data()[i] = n01(rng);
  const AffinityMatrix b = affinity_matrix(rows_to_hypercolumn(r, 5, 6));
  double worst = 0;
  for (Index i = 0; i < 30; ++i)
    for (Index j = 0; j < 30; ++j) {
      double dot = 0, ni = 0, nj = 0;
      for (Index k = 0; k < 5; ++k) {
        dot += r(i, k) * r(j, k);
        ni += r(i, k) * r(i, k);
        nj += r(j, k) * r(j, k);
      }
      const double expect = i == j ? 1.0 : std::max(0.0, dot / std::sqrt(ni * nj));
      worst = std::max(worst, std::abs(b.w(i, j) - expect));
    }
  CHECK(worst < 1e-14);
  CHECK((b.w.array() >= 0).all());
  CHECK(b.w == b.w.transpose());
  CHECK((b.w.diagonal().array() == 1.0).all());
}

TEST_CASE("laplacian hand cases") {
  AffinityMatrix a;
  a.w = Eigen::MatrixXd::Ones(2, 2);
  const Eigen::MatrixXd L = laplacian(a, LaplacianMode::Symmetric);
  Eigen::Matrix2d expect;
  expect << 0.5, -0.5, -0.5, 0.5;
  CHECK((L - expect).norm() < 1e-15);
  const EigenSystem es = eigendecompose(L, 2);
  CHECK(std::abs(es.values[0]) < 1e-14);
  CHECK(es.values[1] == doctest::Approx(1.0));

  a.w = Eigen::MatrixXd::Identity(4, 4);
  CHECK(laplacian(a, LaplacianMode::Symmetric).norm() == 0.0);
  CHECK(laplacian(a, LaplacianMode::RandomWalk).norm() == 0.0);

  a.w = Eigen::MatrixXd::Zero(2, 2);
  CHECK_THROWS_AS(laplacian(a, LaplacianMode::Symmetric), NumericalError);
}

TEST_CASE("random laplacian is exactly symmetric and positive semidefinite") {
  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 5; ++trial) {
    const AffinityMatrix a = afseg::testing::random_connected_affinity(40, rng);
    const Eigen::MatrixXd L = laplacian(a, LaplacianMode::Symmetric);
    CHECK(L == L.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> oracle(L);
    CHECK(oracle.eigenvalues()[0] >= -1e-8);

    // Random walk operator is D^{-1/2} L_sym D^{1/2}.
    const Eigen::VectorXd d = a.w.rowwise().sum();
    const Eigen::MatrixXd rw = d.cwiseSqrt().cwiseInverse().asDiagonal() * L * d.cwiseSqrt().asDiagonal();
    CHECK((laplacian(a, LaplacianMode::RandomWalk) - rw).norm() < 1e-12);
  }
}

TEST_CASE("eigendecompose on hand matrices") {
  const EigenSystem zero = eigendecompose(Eigen::MatrixXd::Zero(4, 4), 4);
  CHECK(zero.values.cwiseAbs().maxCoeff() == 0.0);

  Eigen::Matrix3d p3;
  p3 << 1, -1, 0, -1, 2, -1, 0, -1, 1;
  for (SolverKind s : {SolverKind::Dense, SolverKind::Lanczos}) {
    const EigenSystem es = eigendecompose(p3, 3, s);
    CHECK(std::abs(es.values[0]) < 1e-12);
    CHECK(es.values[1] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(es.values[2] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(es.max_residual < 1e-10);
  }

  CHECK_THROWS_AS(eigendecompose(p3, 4), InvalidInput);
  CHECK_THROWS_AS(eigendecompose(p3, 0), InvalidInput);
  CHECK_THROWS_AS(eigendecompose(Eigen::MatrixXd::Zero(2, 3), 1), InvalidInput);
}

TEST_CASE("lanczos agrees with the dense solver on a random symmetric matrix") {
  std::mt19937_64 rng(16);
  std::normal_distribution<double> n01;
  Eigen::MatrixXd m(50, 50);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n01(rng);
  m = (0.5 * (m + m.transpose())).eval();
  const EigenSystem dense = eigendecompose(m, 5, SolverKind::Dense);
  const EigenSystem lanczos = eigendecompose(m, 5, SolverKind::Lanczos);
  CHECK((dense.values - lanczos.values).cwiseAbs().maxCoeff() < 1e-8);
  CHECK(lanczos.max_residual < 1e-6);
  CHECK((lanczos.vectors.transpose() * lanczos.vectors - Eigen::MatrixXd::Identity(5, 5)).cwiseAbs().maxCoeff() <
        1e-6);
}

TEST_CASE("lanczos finds repeated eigenvalues") {
  Eigen::VectorXd diag(30);
  for (Index i = 0; i < 30; ++i) diag[i] = double(i / 3);  // each value three times
  const Eigen::MatrixXd m = diag.asDiagonal();
  const EigenSystem es = eigendecompose(m, 5, SolverKind::Lanczos);
  CHECK(es.values[0] == doctest::Approx(0.0));
  CHECK(es.values[2] == doctest::Approx(0.0));
  CHECK(es.values[3] == doctest::Approx(1.0));
  CHECK(es.values[4] == doctest::Approx(1.0));
}

TEST_CASE("lanczos reports non-convergence with iteration count and residual") {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> n01;
  Eigen::MatrixXd m(80, 80);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n01(rng);
  m = (m + m.transpose()).eval();
  LanczosOptions opt;
  opt.max_iterations = 12;
  try {
    eigendecompose(m, 5, SolverKind::Lanczos, opt);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("12 iterations") != std::string::npos);
    CHECK(msg.find("residual") != std::string::npos);
  }
}

TEST_CASE("graph spectra: null vector, lambda_0, residuals, solver agreement") {
  std::mt19937_64 rng(18);
  for (int trial = 0; trial < 4; ++trial) {
    const AffinityMatrix a = afseg::testing::random_connected_affinity(200, rng, 0.05 + 0.1 * trial);
    const Eigen::MatrixXd L = laplacian(a, LaplacianMode::Symmetric);
    const Eigen::VectorXd null = a.w.rowwise().sum().cwiseSqrt();
    CHECK((L * null).norm() < 1e-6 * null.norm());

    const EigenSystem dense = laplacian_eigensystem(a, LaplacianMode::Symmetric, 5, SolverKind::Dense);
    const EigenSystem lanczos = laplacian_eigensystem(a, LaplacianMode::Symmetric, 5, SolverKind::Lanczos);
    CHECK(std::abs(dense.values[0]) <= 1e-8);
    CHECK(dense.max_residual < 1e-6);
    CHECK(lanczos.max_residual < 1e-6);
    CHECK((dense.values - lanczos.values).cwiseAbs().maxCoeff() < 1e-8);

    const EigenSystem rw = laplacian_eigensystem(a, LaplacianMode::RandomWalk, 5, SolverKind::Dense);
    CHECK((rw.values - dense.values).cwiseAbs().maxCoeff() == 0.0);
    CHECK(rw.max_residual < 1e-6);
    // The random-walk null vector is constant.
    const Eigen::VectorXd y0 = rw.vectors.col(0);
    CHECK(y0.maxCoeff() - y0.minCoeff() < 1e-8);
  }
}

TEST_CASE("two disconnected cliques are separated exactly") {
  AffinityMatrix a;
  a.w = Eigen::MatrixXd::Zero(4, 4);
  a.w.topLeftCorner(2, 2).setOnes();
  a.w.bottomRightCorner(2, 2).setOnes();
  for (LaplacianMode mode : {LaplacianMode::Symmetric, LaplacianMode::RandomWalk}) {
    const EigenSystem es = laplacian_eigensystem(a, mode, 4, SolverKind::Dense);
    // Oracle: eigenvalues {0, 0, 1, 1}.
    CHECK(std::abs(es.values[1]) < 1e-12);
    CHECK(es.values[2] == doctest::Approx(1.0));
    for (Index gw : {4, 2}) {
      const PartitionResult pr = fiedler_partition(es, 4 / gw, gw);
      const Eigen::Map<const Eigen::Array<std::uint8_t, 4, 1>> flat(pr.mask.data());
      CHECK(flat[0] == flat[1]);
      CHECK(flat[2] == flat[3]);
      CHECK(flat[0] != flat[2]);
      CHECK(pr.foreground_pixels == 2);
    }
  }
}

TEST_CASE("sign rule picks the smaller region") {
  Eigen::MatrixXd v(3, 2);
  v.col(0).setConstant(1 / std::sqrt(3.0));
  v.col(1) << 1, 1, -1;
  v.col(1).normalize();
  const PartitionResult pr = fiedler_partition(bare_system({0.0, 0.5}, v), 1, 3);
  CHECK(pr.mask(0, 0) == 0);
  CHECK(pr.mask(0, 1) == 0);
  CHECK(pr.mask(0, 2) == 1);
  CHECK(pr.bbox == BBox{0, 0, 2, 2});
  CHECK(pr.fiedler_index == 1);

  // Global sign flip changes nothing.
  v.col(1) *= -1;
  CHECK(fiedler_partition(bare_system({0.0, 0.5}, v), 1, 3).mask.isApprox(pr.mask));
}

TEST_CASE("equal regions: the more central region wins") {
  // 1x4 grid, split {0,3} vs {1,2}: centroids coincide, the middle pair is more compact.
  Eigen::MatrixXd v(4, 2);
  v.col(0).setConstant(0.5);
  v.col(1) << 1, -1, -1, 1;
  PartitionResult pr = fiedler_partition(bare_system({0.0, 0.3}, v), 1, 4);
  CHECK(pr.mask(0, 1) == 1);
  CHECK(pr.mask(0, 2) == 1);
  CHECK(pr.foreground_pixels == 2);
  v.col(1) *= -1;
  pr = fiedler_partition(bare_system({0.0, 0.3}, v), 1, 4);
  CHECK(pr.mask(0, 1) == 1);
  CHECK(pr.mask(0, 0) == 0);

  // 2x2 grid, left column vs right column: fully symmetric, top-left stays background.
  Eigen::MatrixXd h(4, 2);
  h.col(0).setConstant(0.5);
  h.col(1) << 1, -1, 1, -1;
  for (double sign : {1.0, -1.0}) {
    h.col(1) *= sign;
    pr = fiedler_partition(bare_system({0.0, 0.3}, h), 2, 2);
    CHECK(pr.mask(0, 0) == 0);
    CHECK(pr.mask(0, 1) == 1);
    CHECK(pr.mask(1, 1) == 1);
  }
}

TEST_CASE("fiedler selection skips near-zero eigenvalues") {
  Eigen::MatrixXd v = Eigen::MatrixXd::Zero(4, 4);
  v.col(0) << 1, 0, 0, 0;
  v.col(1) << 0, 1, 0, 0;
  v.col(2) << 0, 0, 1, 0;
  v.col(3) << 1, 1, 1, -1;
  const PartitionResult pr = fiedler_partition(bare_system({0.0, 1e-9, 5e-7, 0.4}, v), 2, 2);
  CHECK(pr.fiedler_index == 3);
  CHECK(pr.mask(1, 1) == 1);
  CHECK(pr.foreground_pixels == 1);
}

TEST_CASE("degenerate partitions are explicit errors") {
  Eigen::MatrixXd v(3, 2);
  v.col(0).setConstant(1 / std::sqrt(3.0));
  v.col(1).setConstant(1 / std::sqrt(3.0));
  CHECK_THROWS_WITH_AS(fiedler_partition(bare_system({0.0, 0.5}, v), 1, 3), doctest::Contains("degenerate partition"),
                       NumericalError);
  CHECK_THROWS_WITH_AS(fiedler_partition(bare_system({0.0, 1e-9}, v), 1, 3), doctest::Contains("degenerate partition"),
                       NumericalError);
  CHECK_THROWS_AS(fiedler_partition(bare_system({0.0}, v.leftCols(1)), 1, 3), InvalidInput);
  CHECK_THROWS_AS(fiedler_partition(bare_system({0.0, 0.5}, v), 2, 2), InvalidInput);

  // Identical features: every pixel is equally similar, the spectrum is {0, 1, 1, ...}.
  const Eigen::MatrixXd same = Eigen::MatrixXd::Ones(9, 3);
  const AffinityMatrix a = affinity_matrix(rows_to_hypercolumn(same, 3, 3));
  const EigenSystem es = laplacian_eigensystem(a, LaplacianMode::Symmetric, 5);
  CHECK_THROWS_WITH_AS(fiedler_partition(es, 3, 3), doctest::Contains("degenerate partition"), NumericalError);
}

TEST_CASE("centered disk is recovered from two feature clusters") {
  int good = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto scene = afseg::testing::disk_scene(seed);
    const Index g = scene.hc.grid_h;
    for (LaplacianMode mode : {LaplacianMode::Symmetric, LaplacianMode::RandomWalk}) {
      const EigenSystem es = laplacian_eigensystem(affinity_matrix(scene.hc), mode, 5);
      const PartitionResult pr = fiedler_partition(es, g, g);
      const double agree = agreement(pr.mask, scene.truth);
      const double boxed = double(overlap(scene.truth, smaller_region_bbox(pr))) / double(scene.truth.cast<Index>().sum());
      if (mode == LaplacianMode::Symmetric && agree >= 0.95 && boxed >= 0.95) ++good;
      CHECK(agree >= 0.9);
    }
  }
  CHECK(good >= 18);
}

TEST_CASE("partition is invariant to feature scaling") {
  const auto scene = afseg::testing::disk_scene(7, 16);
  std::vector<TensorD> pyr{TensorD(Shape{1, scene.hc.features.cols(), 16, 16})};
  for (Index p = 0; p < 256; ++p)
    for (Index c = 0; c < scene.hc.features.cols(); ++c) pyr[0](0, c, p / 16, p % 16) = scene.hc.features(p, c);
  SpectralOptions opt;
  opt.grid_h = opt.grid_w = 16;
  const SupportEstimate base = estimate_support(pyr, opt);
  pyr[0].array() *= 37.5;
  const SupportEstimate scaled = estimate_support(pyr, opt);
  CHECK(base.partition.mask.isApprox(scaled.partition.mask));
  CHECK(base.partition.bbox == scaled.partition.bbox);
}

TEST_CASE("bounding boxes") {
  Mask m = Mask::Zero(4, 5);
  m(2, 3) = 1;
  CHECK(mask_bbox(m) == BBox{2, 2, 3, 3});
  Mask row = Mask::Zero(4, 4);
  row.row(0).setOnes();
  CHECK(mask_bbox(row) == BBox{0, 0, 0, 3});
  CHECK_THROWS_AS(mask_bbox(Mask::Zero(3, 3)), InvalidInput);
}

TEST_CASE("bbox rescaling rounds outward") {
  // Grid 16 -> level 4: cell r covers level rows floor(r/4) .. ceil((r+1)/4)-1.
  CHECK(rescale_bbox(BBox{5, 5, 0, 15}, 16, 16, 4, 4) == BBox{1, 1, 0, 3});
  CHECK(rescale_bbox(BBox{3, 4, 7, 8}, 16, 16, 4, 4) == BBox{0, 1, 1, 2});
  // Grid 16 -> level 32: each cell doubles.
  CHECK(rescale_bbox(BBox{2, 3, 4, 4}, 16, 16, 32, 32) == BBox{4, 7, 8, 9});
  // Grid 16 -> level 2, a single cell never vanishes.
  const BBox tiny = rescale_bbox(BBox{15, 15, 0, 0}, 16, 16, 2, 2);
  CHECK(tiny == BBox{1, 1, 0, 0});
  // Non-divisible sizes: 10 -> 3.
  CHECK(rescale_bbox(BBox{3, 6, 0, 9}, 10, 10, 3, 3) == BBox{0, 2, 0, 2});
  CHECK_THROWS_AS(rescale_bbox(BBox{0, 16, 0, 0}, 16, 16, 4, 4), InvalidInput);
}

TEST_CASE("prototype oracles") {
  std::mt19937_64 rng(19);
  // Constant map.
  TensorD konst(Shape{1, 3, 6, 6});
  for (Index c = 0; c < 3; ++c)
    for (Index i = 0; i < 36; ++i) konst[c * 36 + i] = double(c) - 0.5;
  const auto pc = extract_prototype(std::vector<TensorD>{konst}, BBox{1, 4, 2, 3}, 12, 12);
  for (Index c = 0; c < 3; ++c) CHECK(pc.levels[0][c] == double(c) - 0.5);

  // Full grid equals global average pooling.
  std::vector<TensorD> pyr{random_tensor(Shape{1, 4, 8, 8}, rng), random_tensor(Shape{1, 5, 4, 4}, rng),
                           random_tensor(Shape{1, 2, 2, 2}, rng)};
  const auto full = extract_prototype(pyr, BBox{0, 15, 0, 15}, 16, 16);
  REQUIRE(full.levels.size() == 3);
  for (std::size_t l = 0; l < pyr.size(); ++l) {
    const Index C = pyr[l].dim(1), HW = pyr[l].dim(2) * pyr[l].dim(3);
    for (Index c = 0; c < C; ++c) {
      double acc = 0;
      for (Index i = 0; i < HW; ++i) acc += pyr[l][c * HW + i];
      CHECK(full.levels[l][c] == acc / double(HW));
    }
  }

  // Random box against a naive loop with the outward rounding written out by hand.
  std::uniform_int_distribution<Index> pick(0, 15);
  for (int trial = 0; trial < 20; ++trial) {
    Index r0 = pick(rng), r1 = pick(rng), c0 = pick(rng), c1 = pick(rng);
    if (r0 > r1) std::swap(r0, r1);
    if (c0 > c1) std::swap(c0, c1);
    const auto proto = extract_prototype(pyr, BBox{r0, r1, c0, c1}, 16, 16);
    for (std::size_t l = 0; l < pyr.size(); ++l) {
      const Index C = pyr[l].dim(1), S = pyr[l].dim(2);
      const Index lr0 = Index(std::floor(double(r0) * S / 16)), lc0 = Index(std::floor(double(c0) * S / 16));
      const Index lr1 = Index(std::ceil(double(r1 + 1) * S / 16)) - 1, lc1 = Index(std::ceil(double(c1 + 1) * S / 16)) - 1;
      for (Index c = 0; c < C; ++c) {
        double acc = 0;
        Index n = 0;
        for (Index y = 0; y < S; ++y)
          for (Index x = 0; x < S; ++x)
            if (y >= lr0 && y <= lr1 && x >= lc0 && x <= lc1) acc += pyr[l](0, c, y, x), ++n;
        CHECK(std::abs(proto.levels[l][c] - acc / double(n)) < 1e-14);
      }
    }
  }
  CHECK(full.provenance == PrototypeSet<double>::Provenance::Spectral);
}

TEST_CASE("laplacian mode names") {
  CHECK(laplacian_mode_from_string("sym") == LaplacianMode::Symmetric);
  CHECK(laplacian_mode_from_string("rw") == LaplacianMode::RandomWalk);
  CHECK(to_string(LaplacianMode::RandomWalk) == "rw");
  CHECK_THROWS_AS(laplacian_mode_from_string("combinatorial"), InvalidInput);
}
