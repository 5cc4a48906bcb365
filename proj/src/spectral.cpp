#include "afseg/spectral.hpp"

#include <cmath>
#include <sstream>

namespace afseg::spectral {

std::string to_string(LaplacianMode mode) { return mode == LaplacianMode::Symmetric ? "sym" : "rw"; }

LaplacianMode laplacian_mode_from_string(const std::string& s) {
  if (s == "sym" || s == "symmetric") return LaplacianMode::Symmetric;
  if (s == "rw" || s == "random_walk") return LaplacianMode::RandomWalk;
  throw InvalidInput("unknown Laplacian mode '" + s + "' (expected sym or rw)");
}

AffinityMatrix affinity_matrix(const Hypercolumn& hc) {
  AffinityMatrix a;
  a.w = (hc.features * hc.features.transpose()).cwiseMax(0.0);
  // Addition commutes exactly, so this is bitwise symmetric.
  a.w = 0.5 * (a.w + a.w.transpose()).eval();
  a.w.diagonal().setOnes();
  return a;
}

namespace {

Eigen::VectorXd degrees(const AffinityMatrix& a) {
  Eigen::VectorXd d = a.w.rowwise().sum();
  for (Index i = 0; i < d.size(); ++i)
    if (!(d[i] > 0)) throw NumericalError("laplacian: node " + std::to_string(i) + " has zero degree");
  return d;
}

}  // namespace

Eigen::MatrixXd laplacian(const AffinityMatrix& a, LaplacianMode mode) {
  const Index n = a.size();
  if (a.w.cols() != n) throw InvalidInput("laplacian: affinity must be square");
  const Eigen::VectorXd d = degrees(a);
  Eigen::MatrixXd L(n, n);
  if (mode == LaplacianMode::Symmetric) {
    const Eigen::VectorXd s = d.cwiseSqrt().cwiseInverse();
    // Fill the upper triangle and mirror so L is exactly symmetric.
    for (Index j = 0; j < n; ++j) {
      for (Index i = 0; i < j; ++i) L(i, j) = L(j, i) = -s[i] * a.w(i, j) * s[j];
      L(j, j) = (d[j] - a.w(j, j)) / d[j];
    }
  } else {
    for (Index i = 0; i < n; ++i) {
      L.row(i) = -a.w.row(i) / d[i];
      L(i, i) = (d[i] - a.w(i, i)) / d[i];
    }
  }
  return L;
}

EigenSystem eigendecompose(const Eigen::MatrixXd& m, Index n_vectors, SolverKind solver,
                           const LanczosOptions& lanczos) {
  const Index n = m.rows();
  if (m.cols() != n) throw InvalidInput("eigendecompose: matrix must be square");
  if (n_vectors < 1 || n_vectors > n)
    throw InvalidInput("eigendecompose: requested " + std::to_string(n_vectors) + " eigenpairs of a " +
                       std::to_string(n) + "x" + std::to_string(n) + " matrix");
  if (!m.allFinite()) throw NumericalError("eigendecompose: matrix has non-finite entries");
  if (solver == SolverKind::Auto) solver = n <= kDenseSolverLimit ? SolverKind::Dense : SolverKind::Lanczos;

  EigenSystem es;
  if (solver == SolverKind::Dense) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> sol(m);
    if (sol.info() != Eigen::Success) throw NumericalError("eigendecompose: dense solver failed to converge");
    es.values = sol.eigenvalues().head(n_vectors);
    es.vectors = sol.eigenvectors().leftCols(n_vectors);
  } else {
    auto res = lanczos_smallest(m, n_vectors, lanczos);
    es.values = std::move(res.values);
    es.vectors = std::move(res.vectors);
  }
  for (Index i = 0; i < n_vectors; ++i)
    es.max_residual = std::max(es.max_residual, (m * es.vectors.col(i) - es.values[i] * es.vectors.col(i)).norm() /
                                                    es.vectors.col(i).norm());
  return es;
}

EigenSystem laplacian_eigensystem(const AffinityMatrix& a, LaplacianMode mode, Index n_vectors, SolverKind solver) {
  EigenSystem es = eigendecompose(laplacian(a, LaplacianMode::Symmetric), n_vectors, solver);
  es.mode = mode;
  es.degrees = degrees(a);
  if (mode == LaplacianMode::RandomWalk) {
    const Eigen::VectorXd s = degrees(a).cwiseSqrt().cwiseInverse();
    for (Index i = 0; i < es.vectors.cols(); ++i) {
      es.vectors.col(i) = s.cwiseProduct(es.vectors.col(i));
      es.vectors.col(i).normalize();
    }
    const Eigen::MatrixXd L = laplacian(a, mode);
    es.max_residual = 0;
    for (Index i = 0; i < es.vectors.cols(); ++i)
      es.max_residual = std::max(es.max_residual, (L * es.vectors.col(i) - es.values[i] * es.vectors.col(i)).norm());
  }
  return es;
}

PartitionResult fiedler_partition(const EigenSystem& es, Index grid_h, Index grid_w) {
  const Index n = es.vectors.rows();
  if (es.values.size() < 2) throw InvalidInput("fiedler_partition: need at least two eigenpairs");
  if (grid_h * grid_w != n)
    throw InvalidInput("fiedler_partition: grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                       " does not match eigenvector length " + std::to_string(n));

  Index near_null = 1;
  while (near_null < es.values.size() && es.values[near_null] <= es.values[0] + 1e-6) ++near_null;

  Index idx = -1;
  Eigen::VectorXd y;
  if (near_null == 2 && es.degrees.size() == n) {
    // Work in the symmetric normalization; D^{1/2} is positive so signs carry over.
    Eigen::MatrixXd basis = es.vectors.leftCols(2);
    if (es.mode == LaplacianMode::RandomWalk)
      for (Index i = 0; i < 2; ++i) basis.col(i) = es.degrees.cwiseSqrt().cwiseProduct(basis.col(i));
    const Eigen::VectorXd trivial = es.degrees.cwiseSqrt().normalized();
    const Eigen::Vector2d c = basis.transpose() * trivial;
    if (c.norm() > 0.5) {
      y = basis * Eigen::Vector2d(-c[1], c[0]);
      idx = 1;
    }
  }
  if (idx < 0) {
    if (near_null >= es.values.size())
      throw NumericalError("degenerate partition: no eigenvalue separated from lambda_0");
    idx = near_null;
    if (idx + 1 < es.values.size() &&
        std::abs(es.values[idx + 1] - es.values[idx]) <= 1e-9 * std::max(1.0, std::abs(es.values[idx])))
      throw NumericalError("degenerate partition: the Fiedler eigenvalue is repeated, its eigenvector is not unique");
    y = es.vectors.col(idx);
  }
  if (y.maxCoeff() - y.minCoeff() < 1e-8) throw NumericalError("degenerate partition: Fiedler vector is constant");

  // Region statistics for y >= 0 (index 0) and y < 0 (index 1).
  const double cy = (double(grid_h) - 1) / 2, cx = (double(grid_w) - 1) / 2;
  Index count[2] = {0, 0};
  double rsum[2] = {0, 0}, csum[2] = {0, 0}, spread[2] = {0, 0};
  for (Index p = 0; p < n; ++p) {
    const int side = y[p] >= 0 ? 0 : 1;
    const double r = double(p / grid_w), c = double(p % grid_w);
    ++count[side];
    rsum[side] += r;
    csum[side] += c;
    spread[side] += (r - cy) * (r - cy) + (c - cx) * (c - cx);
  }
  if (count[0] == 0 || count[1] == 0) throw NumericalError("degenerate partition: one side of the split is empty");
  int fg;
  if (count[0] != count[1]) {
    fg = count[0] < count[1] ? 0 : 1;
  } else {
    auto dist = [&](int s) {
      const double dy = rsum[s] / double(count[s]) - cy, dx = csum[s] / double(count[s]) - cx;
      return dy * dy + dx * dx;
    };
    const double d0 = dist(0), d1 = dist(1);
    // Equal halves have centroids mirrored about the center, so the centroid test
    // usually ties; fall back to the more compact region, then to the one that
    // does not hold the top-left pixel.
    if (std::abs(d0 - d1) > 1e-9)
      fg = d1 < d0 ? 1 : 0;
    else if (std::abs(spread[0] - spread[1]) > 1e-9 * std::max(1.0, spread[0]))
      fg = spread[1] < spread[0] ? 1 : 0;
    else
      fg = y[0] >= 0 ? 1 : 0;
  }

  PartitionResult pr;
  pr.fiedler_index = idx;
  pr.mask = Mask::Zero(grid_h, grid_w);
  for (Index p = 0; p < n; ++p)
    if ((y[p] >= 0 ? 0 : 1) == fg) pr.mask(p / grid_w, p % grid_w) = 1;
  pr.foreground_pixels = count[fg];
  pr.bbox = mask_bbox(pr.mask);
  return pr;
}

BBox smaller_region_bbox(const PartitionResult& pr) { return mask_bbox(pr.mask); }

BBox rescale_bbox(const BBox& box, Index grid_h, Index grid_w, Index level_h, Index level_w) {
  if (box.row_min < 0 || box.col_min < 0 || box.row_max >= grid_h || box.col_max >= grid_w ||
      box.row_min > box.row_max || box.col_min > box.col_max)
    throw InvalidInput("rescale_bbox: box outside its grid");
  BBox out;
  out.row_min = box.row_min * level_h / grid_h;
  out.col_min = box.col_min * level_w / grid_w;
  out.row_max = ((box.row_max + 1) * level_h + grid_h - 1) / grid_h - 1;
  out.col_max = ((box.col_max + 1) * level_w + grid_w - 1) / grid_w - 1;
  out.row_max = std::clamp(out.row_max, out.row_min, level_h - 1);
  out.col_max = std::clamp(out.col_max, out.col_min, level_w - 1);
  return out;
}

}  // namespace afseg::spectral
