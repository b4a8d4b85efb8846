#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "demosel/diffcore/graph.hpp"

namespace demosel::diff {

inline constexpr double kLayerNormEps = 1e-5;

/// Row mask: nonzero marks an excluded entry.
using Mask = std::vector<char>;

namespace kernels {

// Stable softmax of x/temperature over one row; excluded entries get exactly 0.
inline void softmax_row(std::span<const double> x, std::span<double> out, double temperature, const char* mask) {
  double peak = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < x.size(); ++j) {
    if (mask && mask[j]) continue;
    peak = std::max(peak, x[j] / temperature);
  }
  if (peak == -std::numeric_limits<double>::infinity()) throw ExhaustedPoolError("softmax row has no unmasked entry");
  double total = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    if (mask && mask[j]) {
      out[j] = 0.0;
      continue;
    }
    out[j] = std::exp(x[j] / temperature - peak);
    total += out[j];
  }
  for (double& v : out) v /= total;
}

inline void log_softmax_row(std::span<const double> x, std::span<double> out, double temperature, const char* mask) {
  double peak = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < x.size(); ++j) {
    if (mask && mask[j]) continue;
    peak = std::max(peak, x[j] / temperature);
  }
  if (peak == -std::numeric_limits<double>::infinity()) throw ExhaustedPoolError("softmax row has no unmasked entry");
  double total = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    if (mask && mask[j]) continue;
    total += std::exp(x[j] / temperature - peak);
  }
  const double log_total = std::log(total);
  for (std::size_t j = 0; j < x.size(); ++j) {
    out[j] = (mask && mask[j]) ? -std::numeric_limits<double>::infinity() : x[j] / temperature - peak - log_total;
  }
}

inline void check_temperature(double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ParameterError("temperature must be positive and finite, got " + std::to_string(temperature));
  }
}

}  // namespace kernels

namespace detail {

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

inline void require_rank2(const Var& a, const char* op) {
  if (a.value().rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + to_string(a.shape()));
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  Tensor out(Shape{n, m});
  const auto& A = a.value().storage();
  const auto& B = b.value().storage();
  auto& C = out.storage();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &B[p * m];
      double* crow = &C[i * m];
      for (std::size_t j = 0; j < m; ++j) crow[j] += aip * brow[j];
    }
  }
  return detail::make_result(std::move(out), {a, b}, [n, k, m](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const auto& G = self.scratch;
    if (pa.needs_grad) {
      auto& ga = pa.scratch_buffer();
      const auto& B = pb.value.storage();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < m; ++j) acc += G[i * m + j] * B[p * m + j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (pb.needs_grad) {
      auto& gb = pb.scratch_buffer();
      const auto& A = pa.value.storage();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A[i * k + p];
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += aip * G[i * m + j];
        }
      }
    }
  });
}

inline Var transpose(const Var& a) {
  detail::require_rank2(a, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  Tensor out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.value()[i * c + j];
  return detail::make_result(std::move(out), {a}, [r, c](Node& self) {
    Node& pa = *self.parents[0];
    auto& g = pa.scratch_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.scratch[j * r + i];
  });
}

inline Var reshape(const Var& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  Tensor out(std::move(shape), a.value().storage());
  return detail::make_result(std::move(out), {a}, [](Node& self) {
    auto& g = self.parents[0]->scratch_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.scratch[i];
  });
}

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return detail::make_result(std::move(out), {a, b}, [](Node& self) {
    for (auto& parent : self.parents) {
      if (!parent->needs_grad) continue;
      auto& g = parent->scratch_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.scratch[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return detail::make_result(std::move(out), {a, b}, [](Node& self) {
    if (self.parents[0]->needs_grad) {
      auto& g = self.parents[0]->scratch_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.scratch[i];
    }
    if (self.parents[1]->needs_grad) {
      auto& g = self.parents[1]->scratch_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.scratch[i];
    }
  });
}

/// Elementwise product.
inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return detail::make_result(std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.needs_grad) {
      auto& g = pa.scratch_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.scratch[i] * pb.value[i];
    }
    if (pb.needs_grad) {
      auto& g = pb.scratch_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.scratch[i] * pa.value[i];
    }
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.storage()) v *= s;
  return detail::make_result(std::move(out), {a}, [s](Node& self) {
    auto& g = self.parents[0]->scratch_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.scratch[i];
  });
}

/// Tensor times a scalar Var.
inline Var scale_by(const Var& a, const Var& s) {
  if (s.size() != 1) throw DimensionError("scale_by: factor must be a scalar, got " + to_string(s.shape()));
  const double f = s.value()[0];
  Tensor out = a.value();
  for (double& v : out.storage()) v *= f;
  return detail::make_result(std::move(out), {a, s}, [f](Node& self) {
    Node& pa = *self.parents[0];
    Node& ps = *self.parents[1];
    if (pa.needs_grad) {
      auto& g = pa.scratch_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += f * self.scratch[i];
    }
    if (ps.needs_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < pa.value.size(); ++i) acc += self.scratch[i] * pa.value[i];
      ps.scratch_buffer()[0] += acc;
    }
  });
}

/// x[r x c] + b[c], broadcast over rows. The only broadcasting op.
inline Var add_bias(const Var& x, const Var& b) {
  if (b.value().rank() != 1 || b.size() != x.cols()) {
    throw DimensionError("add_bias: bias " + to_string(b.shape()) + " does not match last axis of " +
                         to_string(x.shape()));
  }
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out = x.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += b.value()[j];
  return detail::make_result(std::move(out), {x, b}, [r, c](Node& self) {
    if (self.parents[0]->needs_grad) {
      auto& g = self.parents[0]->scratch_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.scratch[i];
    }
    if (self.parents[1]->needs_grad) {
      auto& g = self.parents[1]->scratch_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[j] += self.scratch[i * c + j];
    }
  });
}

inline Var sum(const Var& a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  return detail::make_result(Tensor::scalar(total), {a}, [](Node& self) {
    auto& g = self.parents[0]->scratch_buffer();
    for (double& v : g) v += self.scratch[0];
  });
}

/// Sum of a list of scalars.
inline Var add_scalars(const std::vector<Var>& terms) {
  if (terms.empty()) return Var::constant(Tensor::scalar(0.0));
  double total = 0.0;
  for (const auto& t : terms) {
    if (t.size() != 1) throw DimensionError("add_scalars: non-scalar term " + to_string(t.shape()));
    total += t.value()[0];
  }
  return detail::make_result(Tensor::scalar(total), terms, [](Node& self) {
    for (auto& parent : self.parents) {
      if (parent->needs_grad) parent->scratch_buffer()[0] += self.scratch[0];
    }
  });
}

/// Single flat element as a scalar.
inline Var pick(const Var& a, std::size_t index) {
  if (index >= a.size()) throw DimensionError("pick: index " + std::to_string(index) + " out of range");
  return detail::make_result(Tensor::scalar(a.value()[index]), {a}, [index](Node& self) {
    self.parents[0]->scratch_buffer()[index] += self.scratch[0];
  });
}

inline Var gelu(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.storage()) v = 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2));
  return detail::make_result(std::move(out), {a}, [](Node& self) {
    Node& pa = *self.parents[0];
    auto& g = pa.scratch_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = pa.value[i];
      const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
      const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
      g[i] += self.scratch[i] * (cdf + x * pdf);
    }
  });
}

inline Var exp(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.storage()) v = std::exp(v);
  return detail::make_result(std::move(out), {a}, [](Node& self) {
    auto& g = self.parents[0]->scratch_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.scratch[i] * self.value[i];
  });
}

/// log(sigmoid(x)) elementwise, computed without overflow.
inline Var log_sigmoid(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.storage()) v = std::min(v, 0.0) - std::log1p(std::exp(-std::abs(v)));
  return detail::make_result(std::move(out), {a}, [](Node& self) {
    Node& pa = *self.parents[0];
    auto& g = pa.scratch_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = pa.value[i];
      // d/dx log sigmoid(x) = sigmoid(-x)
      const double s = x >= 0 ? std::exp(-x) / (1.0 + std::exp(-x)) : 1.0 / (1.0 + std::exp(x));
      g[i] += self.scratch[i] * s;
    }
  });
}

/// Softmax of x/temperature along the last axis. `mask`, when given, has one
/// entry per element; excluded entries come out exactly 0.
inline Var softmax(const Var& x, double temperature, const Mask* mask = nullptr) {
  kernels::check_temperature(temperature);
  if (mask && mask->size() != x.size()) throw DimensionError("softmax: mask size does not match input");
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < r; ++i) {
    kernels::softmax_row(x.value().data().subspan(i * c, c), out.data().subspan(i * c, c), temperature,
                         mask ? mask->data() + i * c : nullptr);
  }
  return detail::make_result(std::move(out), {x}, [r, c, temperature](Node& self) {
    auto& g = self.parents[0]->scratch_buffer();
    const auto& p = self.value.storage();
    const auto& go = self.scratch;
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += go[i * c + j] * p[i * c + j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += p[i * c + j] * (go[i * c + j] - dot) / temperature;
    }
  });
}

/// Log-softmax of x/temperature along the last axis; excluded entries are -inf
/// and receive no gradient.
inline Var log_softmax(const Var& x, double temperature, const Mask* mask = nullptr) {
  kernels::check_temperature(temperature);
  if (mask && mask->size() != x.size()) throw DimensionError("log_softmax: mask size does not match input");
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < r; ++i) {
    kernels::log_softmax_row(x.value().data().subspan(i * c, c), out.data().subspan(i * c, c), temperature,
                             mask ? mask->data() + i * c : nullptr);
  }
  Mask excluded = mask ? *mask : Mask(x.size(), 0);
  return detail::make_result(std::move(out), {x}, [r, c, temperature, excluded](Node& self) {
    auto& g = self.parents[0]->scratch_buffer();
    const auto& lp = self.value.storage();
    const auto& go = self.scratch;
    for (std::size_t i = 0; i < r; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        if (!excluded[i * c + j]) total += go[i * c + j];
      }
      for (std::size_t j = 0; j < c; ++j) {
        if (excluded[i * c + j]) continue;
        g[i * c + j] += (go[i * c + j] - std::exp(lp[i * c + j]) * total) / temperature;
      }
    }
  });
}

/// Per-row normalization with affine gain/bias on the last axis.
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = kLayerNormEps) {
  const std::size_t r = x.rows(), c = x.cols();
  if (gain.size() != c || bias.size() != c || gain.value().rank() != 1 || bias.value().rank() != 1) {
    throw DimensionError("layer_norm: gain/bias " + to_string(gain.shape()) + "/" + to_string(bias.shape()) +
                         " do not match last axis of " + to_string(x.shape()));
  }
  Tensor out(x.shape());
  std::vector<double> normed(x.size());
  std::vector<double> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const auto row = x.value().row(i);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      normed[i * c + j] = (row[j] - mean) * inv_std[i];
      out[i * c + j] = normed[i * c + j] * gain.value()[j] + bias.value()[j];
    }
  }
  return detail::make_result(std::move(out), {x, gain, bias},
                             [r, c, normed = std::move(normed), inv_std = std::move(inv_std)](Node& self) {
                               Node& px = *self.parents[0];
                               Node& pg = *self.parents[1];
                               Node& pb = *self.parents[2];
                               const auto& go = self.scratch;
                               if (pg.needs_grad) {
                                 auto& gg = pg.scratch_buffer();
                                 for (std::size_t i = 0; i < r; ++i)
                                   for (std::size_t j = 0; j < c; ++j) gg[j] += go[i * c + j] * normed[i * c + j];
                               }
                               if (pb.needs_grad) {
                                 auto& gb = pb.scratch_buffer();
                                 for (std::size_t i = 0; i < r; ++i)
                                   for (std::size_t j = 0; j < c; ++j) gb[j] += go[i * c + j];
                               }
                               if (px.needs_grad) {
                                 auto& gx = px.scratch_buffer();
                                 std::vector<double> dn(c);
                                 for (std::size_t i = 0; i < r; ++i) {
                                   double mean_dn = 0.0, mean_dn_n = 0.0;
                                   for (std::size_t j = 0; j < c; ++j) {
                                     dn[j] = go[i * c + j] * pg.value[j];
                                     mean_dn += dn[j];
                                     mean_dn_n += dn[j] * normed[i * c + j];
                                   }
                                   mean_dn /= static_cast<double>(c);
                                   mean_dn_n /= static_cast<double>(c);
                                   for (std::size_t j = 0; j < c; ++j) {
                                     gx[i * c + j] += inv_std[i] * (dn[j] - mean_dn - normed[i * c + j] * mean_dn_n);
                                   }
                                 }
                               }
                             });
}

/// Cosine similarity of two equal-length vectors.
inline Var cosine_similarity(const Var& a, const Var& b) {
  if (a.size() != b.size()) {
    throw DimensionError("cosine_similarity: lengths differ " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a.value()[i] * b.value()[i];
    na += a.value()[i] * a.value()[i];
    nb += b.value()[i] * b.value()[i];
  }
  if (na == 0.0 || nb == 0.0) throw DegenerateInputError("cosine_similarity: zero-norm input");
  const double norm_a = std::sqrt(na), norm_b = std::sqrt(nb);
  const double cos = std::clamp(dot / (norm_a * norm_b), -1.0, 1.0);
  return detail::make_result(Tensor::scalar(cos), {a, b}, [norm_a, norm_b, cos](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const double go = self.scratch[0];
    if (pa.needs_grad) {
      auto& g = pa.scratch_buffer();
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] += go * (pb.value[i] / (norm_a * norm_b) - cos * pa.value[i] / (norm_a * norm_a));
    }
    if (pb.needs_grad) {
      auto& g = pb.scratch_buffer();
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] += go * (pa.value[i] / (norm_a * norm_b) - cos * pb.value[i] / (norm_b * norm_b));
    }
  });
}

/// Cosine of vector v against every row of rows[n x c]; returns [n].
inline Var cosine_rows(const Var& v, const Var& rows) {
  detail::require_rank2(rows, "cosine_rows");
  const std::size_t n = rows.rows(), c = rows.cols();
  if (v.size() != c) throw DimensionError("cosine_rows: vector length does not match row width");
  double nv2 = 0.0;
  for (double x : v.value().data()) nv2 += x * x;
  if (nv2 == 0.0) throw DegenerateInputError("cosine_rows: zero-norm state");
  const double nv = std::sqrt(nv2);
  std::vector<double> row_norm(n), cos(n);
  Tensor out(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0.0, nr = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      dot += v.value()[j] * rows.value()[i * c + j];
      nr += rows.value()[i * c + j] * rows.value()[i * c + j];
    }
    if (nr == 0.0) throw DegenerateInputError("cosine_rows: zero-norm row " + std::to_string(i));
    row_norm[i] = std::sqrt(nr);
    cos[i] = std::clamp(dot / (nv * row_norm[i]), -1.0, 1.0);
    out[i] = cos[i];
  }
  return detail::make_result(std::move(out), {v, rows},
                             [n, c, nv, row_norm = std::move(row_norm), cos = std::move(cos)](Node& self) {
                               Node& pv = *self.parents[0];
                               Node& pr = *self.parents[1];
                               const auto& go = self.scratch;
                               if (pv.needs_grad) {
                                 auto& g = pv.scratch_buffer();
                                 for (std::size_t i = 0; i < n; ++i) {
                                   if (go[i] == 0.0) continue;
                                   for (std::size_t j = 0; j < c; ++j)
                                     g[j] += go[i] * (pr.value[i * c + j] / (nv * row_norm[i]) -
                                                      cos[i] * pv.value[j] / (nv * nv));
                                 }
                               }
                               if (pr.needs_grad) {
                                 auto& g = pr.scratch_buffer();
                                 for (std::size_t i = 0; i < n; ++i) {
                                   if (go[i] == 0.0) continue;
                                   for (std::size_t j = 0; j < c; ++j)
                                     g[i * c + j] += go[i] * (pv.value[j] / (nv * row_norm[i]) -
                                                              cos[i] * pr.value[i * c + j] / (row_norm[i] * row_norm[i]));
                                 }
                               }
                             });
}

/// Columns [start, start+len) of a matrix.
inline Var slice_cols(const Var& a, std::size_t start, std::size_t len) {
  detail::require_rank2(a, "slice_cols");
  const std::size_t r = a.rows(), c = a.cols();
  if (start + len > c) throw DimensionError("slice_cols: range exceeds width");
  Tensor out(Shape{r, len});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < len; ++j) out[i * len + j] = a.value()[i * c + start + j];
  return detail::make_result(std::move(out), {a}, [r, c, start, len](Node& self) {
    auto& g = self.parents[0]->scratch_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < len; ++j) g[i * c + start + j] += self.scratch[i * len + j];
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t r = parts.front().rows();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_cols");
    if (p.rows() != r) throw DimensionError("concat_cols: row counts differ");
    widths.push_back(p.cols());
    total += p.cols();
  }
  Tensor out(Shape{r, total});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * total + offset + j] = p.value()[i * w + j];
    offset += w;
  }
  return detail::make_result(std::move(out), parts, [r, total, widths](Node& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      const std::size_t w = widths[k];
      if (self.parents[k]->needs_grad) {
        auto& g = self.parents[k]->scratch_buffer();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.scratch[i * total + offset + j];
      }
      offset += w;
    }
  });
}

/// Stacks rank-1 vectors (or rank-2 blocks) vertically.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts.front().cols();
  std::size_t total_rows = 0;
  std::vector<double> data;
  for (const auto& p : parts) {
    if (p.cols() != c || p.value().rank() == 0) throw DimensionError("concat_rows: widths differ");
    total_rows += p.rows();
    data.insert(data.end(), p.value().storage().begin(), p.value().storage().end());
  }
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) sizes.push_back(p.size());
  return detail::make_result(Tensor(Shape{total_rows, c}, std::move(data)), parts, [sizes](Node& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      if (self.parents[k]->needs_grad) {
        auto& g = self.parents[k]->scratch_buffer();
        for (std::size_t i = 0; i < sizes[k]; ++i) g[i] += self.scratch[offset + i];
      }
      offset += sizes[k];
    }
  });
}

/// Rows of a matrix at the given indices, in order (repeats allowed).
inline Var gather_rows(const Var& a, const std::vector<std::size_t>& indices) {
  detail::require_rank2(a, "gather_rows");
  const std::size_t c = a.cols();
  Tensor out(Shape{indices.size(), c});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= a.rows()) throw DimensionError("gather_rows: index " + std::to_string(indices[r]) + " out of range");
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = a.value()[indices[r] * c + j];
  }
  return detail::make_result(std::move(out), {a}, [indices, c](Node& self) {
    auto& g = self.parents[0]->scratch_buffer();
    for (std::size_t r = 0; r < indices.size(); ++r)
      for (std::size_t j = 0; j < c; ++j) g[indices[r] * c + j] += self.scratch[r * c + j];
  });
}

/// Row i of a matrix as a rank-1 vector.
inline Var row(const Var& a, std::size_t i) {
  detail::require_rank2(a, "row");
  const std::size_t c = a.cols();
  if (i >= a.rows()) throw DimensionError("row: index " + std::to_string(i) + " out of range");
  std::vector<double> data(a.value().storage().begin() + static_cast<std::ptrdiff_t>(i * c),
                           a.value().storage().begin() + static_cast<std::ptrdiff_t>((i + 1) * c));
  return detail::make_result(Tensor::vector(std::move(data)), {a}, [i, c](Node& self) {
    auto& g = self.parents[0]->scratch_buffer();
    for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.scratch[j];
  });
}

}  // namespace demosel::diff
