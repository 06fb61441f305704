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


#pragma once

#include <vector>

#include <Eigen/Dense>

#include "nullsteer/activation_store.hpp"

// Null-space projection of retain activations and the closed-form ridge
// solution for the input-aware steering map f(h) = W P h. Everything here is
// double precision regardless of how the activations were stored.

namespace nullsteer {

struct NullspaceProjection {
  Eigen::MatrixXd P;               // d x d projector onto the retain null space
  int rank_retained = 0;           // eigenvalues above the cutoff
  double cutoff_tau = 0.0;
  std::vector<double> eigenvalues; // of H_r H_r^T, descending

  int dim() const { return static_cast<int>(P.rows()); }
  int null_dim() const { return dim() - rank_retained; }
};

struct SteeringMatrixSolution {
  Eigen::MatrixXd W;
  Eigen::MatrixXd effective;  // W * P, the only part that acts on inputs
  double gamma = 0.0;
  double residual = 0.0;      // ||W P H_f - D||_F
};

Eigen::MatrixXd to_eigen(const ActivationMatrix& m);

// Eigenvalues <= tau * lambda_max of H_r H_r^T count as zero; P spans their
// eigenvectors. Requires 0 < tau < 1 and a non-empty, finite H_r.
NullspaceProjection compute_projection(const Eigen::MatrixXd& retain, double tau = 1e-6);
NullspaceProjection compute_projection(const ActivationMatrix& retain, double tau = 1e-6);

// Moore-Penrose pseudoinverse of a symmetric PSD matrix; eigenvalues at or
// below rel_cutoff * lambda_max are dropped.
Eigen::MatrixXd pseudo_inverse_psd(const Eigen::MatrixXd& a, double rel_cutoff = 1e-10);

// W = D (P H_f)^T (P H_f H_f^T P^T + gamma P P^T)^+.
SteeringMatrixSolution solve_steering_matrix(const Eigen::MatrixXd& forget,
                                             const Eigen::MatrixXd& target,
                                             const NullspaceProjection& proj,
                                             double gamma);

// Plain gradient descent from M = 0 on ||M P H_f - D||^2 + gamma ||M P||^2;
// returns M P. A negative step selects 1 / (2 lambda_max) of the quadratic
// term; step = 0 leaves M at zero.
Eigen::MatrixXd lsq_oracle(const Eigen::MatrixXd& forget, const Eigen::MatrixXd& target,
                           const Eigen::MatrixXd& P, double gamma, int iters,
                           double step = -1.0);

}  // namespace nullsteer
