#pragma once

#include <vector>

#include "featureflow/linalg.hpp"
#include "featureflow/tensors.hpp"

namespace fftest {

using namespace featureflow;

inline MatrixF random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
  MatrixF m(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(normal(rng) * scale);
  return m;
}

inline MatrixD random_matrix_d(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
  MatrixD m(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = normal(rng) * scale;
  return m;
}

/// ReLU dictionary with encoder = decoder^T and zero biases.
inline FeatureDictionary tied_dictionary(SitePosition p, const MatrixF& decoder, Activation act = {ActivationKind::ReLU, 0}) {
  VectorF thresholds;
  if (act.kind == ActivationKind::JumpReLU) thresholds.assign(decoder.cols(), 0.0f);
  return FeatureDictionary(p, act, decoder, transpose(decoder), VectorF(decoder.cols(), 0.0f), VectorF(decoder.rows(), 0.0f),
                           thresholds);
}

inline FeatureDictionary random_dictionary(SitePosition p, std::size_t d, std::size_t D, Rng& rng) {
  return tied_dictionary(p, random_matrix(d, D, rng));
}

/// Independent cosine: plain loops over the raw float decoder, no shared helpers.
inline double raw_cosine(const MatrixF& a, std::size_t i, const MatrixF& b, std::size_t j) {
  long double ab = 0, aa = 0, bb = 0;
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const long double x = a(r, i), y = b(r, j);
    ab += x * y;
    aa += x * x;
    bb += y * y;
  }
  return static_cast<double>(ab / std::sqrt(aa * bb));
}

}  // namespace fftest
