#pragma once

// Hand-built ensembles with known predictions.

#include "cmbpo/dynamics_model.hpp"

#include <numeric>

namespace cmbpo::testing {

/// Members without hidden layers and identity normalisers: every member
/// predicts the exact delta (A - I) s + B a plus its own offset, with
/// variance softplus(raw_var).
inline EnsembleModel affine_ensemble(const Matrix& A, const Matrix& B, const std::vector<Vector>& offsets,
                                     double raw_var = -3.0) {
  const Index sdim = A.rows(), adim = B.cols();
  EnsembleConfig cfg;
  cfg.members = static_cast<int>(offsets.size());
  cfg.elites = cfg.members;
  cfg.hidden = {};
  EnsembleModel m(sdim, adim, cfg, 0);
  for (std::size_t k = 0; k < offsets.size(); ++k) {
    auto& net = m.member(static_cast<Index>(k)).net();
    net.set_params(Vector::Zero(net.n_params()));
    auto W = net.weight(0);
    W.block(0, 0, sdim, sdim) = A - Matrix::Identity(sdim, sdim);
    W.block(0, sdim, sdim, adim) = B;
    net.bias(0).head(sdim) = offsets[k];
    net.bias(0).tail(sdim + 1).setConstant(raw_var);
  }
  std::vector<Index> all(offsets.size());
  std::iota(all.begin(), all.end(), Index{0});
  m.set_elites(all);
  return m;
}

inline EnsembleModel affine_ensemble(const Matrix& A, const Matrix& B, int members) {
  return affine_ensemble(A, B, std::vector<Vector>(static_cast<std::size_t>(members), Vector::Zero(A.rows())));
}

}  // namespace cmbpo::testing
