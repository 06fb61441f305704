// Copyright 2026 The nullsteer Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#include "nullsteer/steering_solver.hpp"

#include <cmath>
#include <string>

#include "nullsteer/errors.hpp"

namespace nullsteer {
namespace {

void require_finite(const Eigen::MatrixXd& m, const char* what) {
  if (!m.allFinite()) throw ValidationError(std::string(what) + " contains non-finite entries");
}

}  // namespace

Eigen::MatrixXd to_eigen(const ActivationMatrix& m) {
  Eigen::MatrixXd out(m.rows, m.cols);
  for (int j = 0; j < m.cols; ++j) {
    for (int i = 0; i < m.rows; ++i) out(i, j) = m.at(i, j);
  }
  return out;
}

NullspaceProjection compute_projection(const Eigen::MatrixXd& retain, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw RangeError("nullspace tau must lie in (0, 1)");
  if (retain.rows() == 0 || retain.cols() == 0) {
    throw ValidationError("retain activation matrix is empty");
  }
  require_finite(retain, "retain activation matrix");
  const int d = static_cast<int>(retain.rows());
  const Eigen::MatrixXd gram = retain * retain.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
  if (eig.info() != Eigen::Success) {
    throw NumericalError("eigendecomposition of H_r H_r^T failed");
  }
  // Ascending order from Eigen.
  const Eigen::VectorXd& vals = eig.eigenvalues();
  const double lmax = std::max(vals(d - 1), 0.0);
  const double cutoff = tau * lmax;
  int zero_count = 0;
  while (zero_count < d && vals(zero_count) <= cutoff) ++zero_count;

  NullspaceProjection proj;
  proj.cutoff_tau = tau;
  proj.rank_retained = d - zero_count;
  const Eigen::MatrixXd basis = eig.eigenvectors().leftCols(zero_count);
  proj.P = basis * basis.transpose();
  proj.P = 0.5 * (proj.P + proj.P.transpose()).eval();
  proj.eigenvalues.resize(d);
  for (int i = 0; i < d; ++i) proj.eigenvalues[i] = vals(d - 1 - i);
  return proj;
}

NullspaceProjection compute_projection(const ActivationMatrix& retain, double tau) {
  return compute_projection(to_eigen(retain), tau);
}

Eigen::MatrixXd pseudo_inverse_psd(const Eigen::MatrixXd& a, double rel_cutoff) {
  if (a.rows() != a.cols()) throw ShapeError("pseudo_inverse_psd: matrix is not square");
  const Eigen::MatrixXd sym = 0.5 * (a + a.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
  if (eig.info() != Eigen::Success) throw NumericalError("pseudoinverse eigendecomposition failed");
  const Eigen::VectorXd& vals = eig.eigenvalues();
  const double lmax = vals.size() > 0 ? vals.maxCoeff() : 0.0;
  Eigen::VectorXd inv = Eigen::VectorXd::Zero(vals.size());
  if (lmax > 0.0) {
    for (int i = 0; i < vals.size(); ++i) {
      if (vals(i) > rel_cutoff * lmax) inv(i) = 1.0 / vals(i);
    }
  }
  const Eigen::MatrixXd& u = eig.eigenvectors();
  return u * inv.asDiagonal() * u.transpose();
}

SteeringMatrixSolution solve_steering_matrix(const Eigen::MatrixXd& forget,
                                             const Eigen::MatrixXd& target,
                                             const NullspaceProjection& proj,
                                             double gamma) {
  const Eigen::MatrixXd& P = proj.P;
  if (P.rows() != P.cols() || forget.rows() != P.rows() ||
      target.rows() != P.rows() || target.cols() != forget.cols()) {
    throw ShapeError("solve_steering_matrix: need H_f d x N, D d x N and P d x d (got H_f " +
                     std::to_string(forget.rows()) + "x" + std::to_string(forget.cols()) +
                     ", D " + std::to_string(target.rows()) + "x" +
                     std::to_string(target.cols()) + ", P " + std::to_string(P.rows()) +
                     "x" + std::to_string(P.cols()) + ")");
  }
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw RangeError("gamma must be >= 0");
  require_finite(forget, "forget activation matrix");
  require_finite(target, "target matrix");

  const Eigen::MatrixXd projected = P * forget;
  const Eigen::MatrixXd bracket =
      projected * projected.transpose() + gamma * P * P.transpose();
  SteeringMatrixSolution sol;
  sol.gamma = gamma;
  sol.W = target * projected.transpose() * pseudo_inverse_psd(bracket);
  sol.effective = sol.W * P;
  if (!sol.effective.allFinite()) throw NumericalError("steering matrix is not finite");
  sol.residual = (sol.effective * forget - target).norm();
  return sol;
}

Eigen::MatrixXd lsq_oracle(const Eigen::MatrixXd& forget, const Eigen::MatrixXd& target,
                           const Eigen::MatrixXd& P, double gamma, int iters,
                           double step) {
  if (iters < 1) throw RangeError("lsq_oracle: iters must be >= 1");
  if (forget.rows() != P.rows() || target.rows() != P.rows() ||
      target.cols() != forget.cols() || P.rows() != P.cols()) {
    throw ShapeError("lsq_oracle: inconsistent shapes");
  }
  const Eigen::MatrixXd projected = P * forget;
  // Objective is trace(M B M^T) - 2 trace(M C^T) + const with
  // B = A A^T + gamma P P^T and C = D A^T, A = P H_f.
  const Eigen::MatrixXd B = projected * projected.transpose() + gamma * P * P.transpose();
  const Eigen::MatrixXd C = target * projected.transpose();
  if (!std::isfinite(step)) throw RangeError("lsq_oracle: step must be finite");
  if (step < 0.0) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(B, Eigen::EigenvaluesOnly);
    const double lmax = eig.eigenvalues().maxCoeff();
    if (!(lmax > 0.0)) return Eigen::MatrixXd::Zero(P.rows(), P.cols());
    step = 1.0 / (2.0 * lmax);
  }
  auto objective = [&](const Eigen::MatrixXd& M) {
    return (M * projected - target).squaredNorm() + gamma * (M * P).squaredNorm();
  };
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(target.rows(), P.rows());
  double prev = objective(M);
  for (int it = 0; it < iters; ++it) {
    M -= step * (2.0 * M * B - 2.0 * C);
    if (!M.allFinite()) throw NumericalError("lsq_oracle diverged; reduce the step size");
    if ((it & 63) == 63) {
      const double cur = objective(M);
      if (cur > prev * (1.0 + 1e-12) + 1e-300) {
        throw NumericalError("lsq_oracle objective increased; reduce the step size");
      }
      prev = cur;
    }
  }
  return M * P;
}

}  // namespace nullsteer
