#pragma once

// Annotation-free support-object estimation: hypercolumn features -> thresholded
// cosine affinity graph -> normalized Laplacian spectrum -> sign split of the
// Fiedler vector -> bounding box of the smaller region -> per-level prototypes.

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "afseg/kernels.hpp"
#include "afseg/lanczos.hpp"
#include "afseg/mask.hpp"
#include "afseg/tensor.hpp"

namespace afseg::spectral {

enum class LaplacianMode { Symmetric, RandomWalk };
enum class SolverKind { Auto, Dense, Lanczos };

/// Above this many graph nodes the Auto solver switches from dense to Lanczos.
inline constexpr Index kDenseSolverLimit = 4096;

std::string to_string(LaplacianMode mode);
LaplacianMode laplacian_mode_from_string(const std::string& s);

struct Hypercolumn {
  Eigen::MatrixXd features;  // (grid_h * grid_w) x sum(level_dims), rows L2-normalized
  Index grid_h = 0, grid_w = 0;
  std::vector<Index> level_dims;
  Index zero_norm_rows = 0;  // rows left as zero vectors
};

struct AffinityMatrix {
  Eigen::MatrixXd w;
  Index size() const { return w.rows(); }
};

struct EigenSystem {
  Eigen::VectorXd values;   // ascending
  Eigen::MatrixXd vectors;  // column i pairs with values[i]
  LaplacianMode mode = LaplacianMode::Symmetric;
  double max_residual = 0;
  // Node degrees of the graph the Laplacian came from; empty for a bare matrix.
  Eigen::VectorXd degrees;
};

struct PartitionResult {
  Mask mask;  // 1 = foreground (the smaller region)
  BBox bbox;
  Index fiedler_index = 1;
  Index foreground_pixels = 0;
};

template <typename Scalar>
struct PrototypeSet {
  enum class Provenance { Spectral, OracleMask };
  std::vector<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> levels;
  Provenance provenance = Provenance::Spectral;
};

/// Resize every level to the target grid, stack channels per pixel, L2-normalize rows.
template <typename Scalar>
Hypercolumn build_hypercolumn(const std::vector<Tensor<Scalar>>& pyramid, Index target_h, Index target_w) {
  if (pyramid.empty()) throw InvalidInput("build_hypercolumn: empty pyramid");
  if (target_h < 1 || target_w < 1) throw InvalidInput("build_hypercolumn: target grid must be >= 1");
  Hypercolumn hc;
  hc.grid_h = target_h;
  hc.grid_w = target_w;
  Index total = 0;
  for (const auto& level : pyramid) {
    require_rank(level, 4, "build_hypercolumn level");
    if (level.dim(0) != 1) throw InvalidInput("build_hypercolumn: levels must have batch size 1");
    hc.level_dims.push_back(level.dim(1));
    total += level.dim(1);
  }
  const Index n = target_h * target_w;
  hc.features.resize(n, total);
  Index offset = 0;
  for (const auto& level : pyramid) {
    const Tensor<Scalar> resized = bilinear_resize(level, target_h, target_w);
    const Index C = level.dim(1);
    for (Index c = 0; c < C; ++c)
      hc.features.col(offset + c) = resized.array().segment(c * n, n).template cast<double>().matrix();
    offset += C;
  }
  for (Index i = 0; i < n; ++i) {
    const double norm = hc.features.row(i).norm();
    if (norm > 0 && std::isfinite(norm)) {
      hc.features.row(i) /= norm;
    } else {
      hc.features.row(i).setZero();
      ++hc.zero_norm_rows;
    }
  }
  return hc;
}

/// W = max(0, F F^T), symmetrized, unit diagonal.
AffinityMatrix affinity_matrix(const Hypercolumn& hc);

/// Symmetric: D^{-1/2} (D - W) D^{-1/2}.  Random walk: D^{-1} (D - W).
Eigen::MatrixXd laplacian(const AffinityMatrix& w, LaplacianMode mode);

/// Smallest `n_vectors` eigenpairs of a symmetric matrix.
EigenSystem eigendecompose(const Eigen::MatrixXd& symmetric, Index n_vectors, SolverKind solver = SolverKind::Auto,
                           const LanczosOptions& lanczos = {});

/// Eigenpairs of the Laplacian of `w` in the requested normalization. The random-walk
/// problem is solved through the symmetric one: y = D^{-1/2} v, same eigenvalues.
EigenSystem laplacian_eigensystem(const AffinityMatrix& w, LaplacianMode mode, Index n_vectors,
                                  SolverKind solver = SolverKind::Auto);

/// Sign split of the Fiedler vector: the first eigenvector whose eigenvalue exceeds
/// lambda_0 + 1e-6. When exactly two eigenvalues sit within 1e-6 of lambda_0 (two
/// near-disconnected components) and the degrees are known, the split uses the
/// direction of that pair orthogonal to the trivial null vector instead, which
/// separates the components. The region with fewer pixels is foreground; on a tie,
/// the one whose centroid lies nearer the grid center, then the one with the smaller
/// mean squared distance to the center, then the one without the top-left pixel.
PartitionResult fiedler_partition(const EigenSystem& es, Index grid_h, Index grid_w);

BBox smaller_region_bbox(const PartitionResult& pr);

/// Rescale a box from a (grid_h x grid_w) grid onto (level_h x level_w), rounding
/// outward so the result is never empty.
BBox rescale_bbox(const BBox& box, Index grid_h, Index grid_w, Index level_h, Index level_w);

/// Masked average pooling of every level over the level-scaled box.
template <typename Scalar>
PrototypeSet<Scalar> extract_prototype(const std::vector<Tensor<Scalar>>& pyramid, const BBox& box, Index grid_h,
                                       Index grid_w,
                                       typename PrototypeSet<Scalar>::Provenance provenance =
                                           PrototypeSet<Scalar>::Provenance::Spectral) {
  PrototypeSet<Scalar> out;
  out.provenance = provenance;
  for (const auto& level : pyramid) {
    require_rank(level, 4, "extract_prototype level");
    const Index C = level.dim(1), H = level.dim(2), W = level.dim(3);
    const BBox b = rescale_bbox(box, grid_h, grid_w, H, W);
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> v(C);
    const double count = double(b.height() * b.width());
    for (Index c = 0; c < C; ++c) {
      double acc = 0;
      for (Index r = b.row_min; r <= b.row_max; ++r)
        for (Index q = b.col_min; q <= b.col_max; ++q) acc += double(level(0, c, r, q));
      v[c] = Scalar(acc / count);
    }
    out.levels.push_back(std::move(v));
  }
  return out;
}

struct SpectralOptions {
  Index grid_h = 50, grid_w = 50;
  LaplacianMode mode = LaplacianMode::Symmetric;
  Index n_vectors = 5;
  SolverKind solver = SolverKind::Auto;
};

struct SupportEstimate {
  Hypercolumn hypercolumn;
  EigenSystem eigensystem;
  PartitionResult partition;
};

/// The full annotation-free path for one support image.
template <typename Scalar>
SupportEstimate estimate_support(const std::vector<Tensor<Scalar>>& pyramid, const SpectralOptions& opt) {
  SupportEstimate est;
  est.hypercolumn = build_hypercolumn(pyramid, opt.grid_h, opt.grid_w);
  const AffinityMatrix w = affinity_matrix(est.hypercolumn);
  est.eigensystem = laplacian_eigensystem(w, opt.mode, opt.n_vectors, opt.solver);
  est.partition = fiedler_partition(est.eigensystem, opt.grid_h, opt.grid_w);
  return est;
}

}  // namespace afseg::spectral
