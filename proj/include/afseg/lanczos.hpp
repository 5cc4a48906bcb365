#pragma once

// Symmetric Lanczos with full reorthogonalization for the smallest eigenpairs.
//
// Each pass builds a Krylov basis that is kept orthogonal to everything found so
// far; a pass that runs into an invariant subspace restarts from a fresh random
// vector, so repeated eigenvalues are picked up. A verification pass deflated
// against the accepted vectors catches copies a single Krylov sequence misses.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "afseg/errors.hpp"

namespace afseg::spectral {

struct LanczosOptions {
  Eigen::Index max_iterations = 0;  // per pass; 0 means the matrix dimension
  Eigen::Index check_every = 10;
  double tolerance = 1e-10;  // residual bound relative to ||A||
  int max_passes = 3;
  std::uint64_t seed = 0x5eed;
};

struct LanczosResult {
  Eigen::VectorXd values;   // ascending
  Eigen::MatrixXd vectors;  // unit columns
  Eigen::Index iterations = 0;
  double max_residual = 0;
};

namespace detail {

struct RitzPairs {
  Eigen::VectorXd values;
  Eigen::MatrixXd vectors;
  double anorm = 0;
};

inline void orthogonalize(Eigen::VectorXd& v, const Eigen::MatrixXd& basis, Eigen::Index cols) {
  if (cols == 0) return;
  for (int rep = 0; rep < 2; ++rep) v.noalias() -= basis.leftCols(cols) * (basis.leftCols(cols).transpose() * v);
}

template <typename MatrixType>
RitzPairs lanczos_pass(const MatrixType& A, Eigen::Index want, const Eigen::MatrixXd& locked,
                       const LanczosOptions& opt, std::mt19937_64& rng, Eigen::Index& iterations) {
  using Eigen::Index;
  const Index n = A.rows();
  const Index room = n - locked.cols();
  const Index max_m = std::min(room, opt.max_iterations > 0 ? opt.max_iterations : n);
  want = std::min(want, room);

  std::normal_distribution<double> normal;
  auto fresh = [&](const Eigen::MatrixXd& Q, Index m) {
    Eigen::VectorXd v(n);
    for (Index i = 0; i < n; ++i) v[i] = normal(rng);
    orthogonalize(v, locked, locked.cols());
    orthogonalize(v, Q, m);
    return v;
  };

  Eigen::MatrixXd Q(n, max_m);
  Eigen::VectorXd alpha(max_m), beta(max_m);
  Eigen::VectorXd q = fresh(Q, 0);
  q.normalize();
  double anorm = 0;
  Index m = 0;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> tri;
  double last_residual = std::numeric_limits<double>::infinity();
  bool converged = false;

  auto solve_tridiagonal = [&](Index size) {
    Eigen::MatrixXd T = Eigen::MatrixXd::Zero(size, size);
    for (Index i = 0; i < size; ++i) {
      T(i, i) = alpha[i];
      if (i + 1 < size) T(i, i + 1) = T(i + 1, i) = beta[i];
    }
    tri.compute(T);
  };

  for (Index j = 0; j < max_m; ++j) {
    Q.col(j) = q;
    Eigen::VectorXd w = A * q;
    alpha[j] = q.dot(w);
    w -= alpha[j] * q;
    if (j > 0) w -= beta[j - 1] * Q.col(j - 1);
    orthogonalize(w, Q, j + 1);
    orthogonalize(w, locked, locked.cols());
    const double b = w.norm();
    m = j + 1;
    anorm = std::max(anorm, std::abs(alpha[j]) + b + (j > 0 ? beta[j - 1] : 0.0));
    const bool breakdown = b <= 1e-13 * std::max(anorm, 1.0);

    if (m >= want && (m % opt.check_every == 0 || breakdown || m == max_m)) {
      solve_tridiagonal(m);
      last_residual = 0;
      for (Index i = 0; i < want; ++i) last_residual = std::max(last_residual, b * std::abs(tri.eigenvectors()(m - 1, i)));
      if (last_residual <= opt.tolerance * std::max(anorm, 1.0)) {
        converged = true;
        break;
      }
    }
    if (m == max_m) break;
    if (breakdown) {
      // Invariant subspace found: continue in its orthogonal complement.
      beta[j] = 0;
      q = fresh(Q, m);
      const double qn = q.norm();
      if (qn <= 1e-10) break;
      q /= qn;
    } else {
      beta[j] = b;
      q = w / b;
    }
  }
  iterations += m;
  const bool exhausted = m == room;
  if (!converged && !exhausted) {
    std::ostringstream msg;
    msg << "Lanczos did not converge after " << m << " iterations (residual " << last_residual << ")";
    throw NumericalError(msg.str());
  }
  solve_tridiagonal(m);
  RitzPairs out;
  out.values = tri.eigenvalues().head(want);
  out.vectors = Q.leftCols(m) * tri.eigenvectors().leftCols(want);
  for (Index i = 0; i < want; ++i) out.vectors.col(i).normalize();
  out.anorm = anorm;
  return out;
}

}  // namespace detail

/// The `k` smallest eigenpairs of the symmetric matrix `A` (dense or sparse Eigen type).
template <typename MatrixType>
LanczosResult lanczos_smallest(const MatrixType& A, Eigen::Index k, const LanczosOptions& opt = {}) {
  using Eigen::Index;
  const Index n = A.rows();
  if (A.cols() != n) throw InvalidInput("lanczos: matrix must be square");
  if (k < 1 || k > n) throw InvalidInput("lanczos: requested eigenpair count out of range");
  std::mt19937_64 rng(opt.seed);
  LanczosResult res;

  auto best = detail::lanczos_pass(A, k, Eigen::MatrixXd(n, 0), opt, rng, res.iterations);
  for (int pass = 1; pass < opt.max_passes && best.vectors.cols() < n; ++pass) {
    auto extra = detail::lanczos_pass(A, k, best.vectors, opt, rng, res.iterations);
    const double slack = opt.tolerance * std::max(best.anorm, 1.0);
    if (extra.values.size() == 0 || extra.values[0] >= best.values[best.values.size() - 1] - slack) break;
    // Merge and keep the k smallest.
    const Index total = best.values.size() + extra.values.size();
    Eigen::VectorXd vals(total);
    Eigen::MatrixXd vecs(n, total);
    vals << best.values, extra.values;
    vecs << best.vectors, extra.vectors;
    std::vector<Index> order(static_cast<std::size_t>(total));
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return vals[a] < vals[b]; });
    const Index keep = std::min(k, total);
    best.values.resize(keep);
    best.vectors.resize(n, keep);
    for (Index i = 0; i < keep; ++i) {
      best.values[i] = vals[order[std::size_t(i)]];
      best.vectors.col(i) = vecs.col(order[std::size_t(i)]);
    }
  }
  res.values = best.values;
  res.vectors = best.vectors;
  for (Index i = 0; i < res.values.size(); ++i)
    res.max_residual =
        std::max(res.max_residual, (A * res.vectors.col(i) - res.values[i] * res.vectors.col(i)).norm());
  return res;
}

}  // namespace afseg::spectral
