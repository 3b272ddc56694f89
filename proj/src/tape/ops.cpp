#include "circle/tape.hpp"

#include <cmath>

namespace circle::tape {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw Error(ErrorCode::ShapeMismatch, what);
}

Tape& tape_of(const Var& v) { return *v.tape(); }

bool wants(Tape& t, const Var& v) { return v.valid() && t.requires_grad(v); }

}  // namespace

Var matmul(const Var& a, const Var& b) {
  return linear(a, b, Var{});
}

Var linear(const Var& x, const Var& w, const Var& b) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require(xv.cols() == wv.rows(), "linear: inner dimensions differ");
  Tensor out = Tensor::matrix(xv.rows(), wv.cols());
  out.mat().noalias() = xv.mat() * wv.mat();
  if (b.valid()) {
    const Tensor& bv = b.value();
    require(bv.size() == wv.cols(), "linear: bias size");
    out.mat().rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bv.data(), bv.size());
  }
  return t.record(std::move(out), {x, w, b}, [x, w, b](Tape& t, const Tensor& g) {
    if (wants(t, x)) t.grad(x).mat().noalias() += g.mat() * w.value().mat().transpose();
    if (wants(t, w)) t.grad(w).mat().noalias() += x.value().mat().transpose() * g.mat();
    if (wants(t, b)) {
      Tensor& gb = t.grad(b);
      Eigen::Map<Eigen::RowVectorXd>(gb.data(), gb.size()) += g.mat().colwise().sum();
    }
  });
}

Var add(const Var& a, const Var& b) {
  require(a.value().rows() == b.value().rows() && a.value().cols() == b.value().cols(), "add: shape");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    for (const Var& v : {a, b}) {
      if (!wants(t, v)) continue;
      Tensor& gv = t.grad(v);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require(a.value().rows() == b.value().rows() && a.value().cols() == b.value().cols(), "sub: shape");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (wants(t, a)) {
      Tensor& ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (wants(t, b)) {
      Tensor& gb = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require(a.value().rows() == b.value().rows() && a.value().cols() == b.value().cols(), "mul: shape");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (wants(t, a)) {
      Tensor& ga = t.grad(a);
      const Tensor& bv = b.value();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (wants(t, b)) {
      Tensor& gb = t.grad(b);
      const Tensor& av = a.value();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var mul_const(const Var& a, const Tensor& c) {
  require(a.value().size() == c.size(), "mul_const: shape");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
  return tape_of(a).record(std::move(out), {a}, [a, c](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c[i];
  });
}

Var add_const(const Var& a, const Tensor& c) {
  require(a.value().size() == c.size(), "add_const: shape");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += c[i];
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.values()) v *= s;
  return tape_of(a).record(std::move(out), {a}, [a, s](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Tensor leaky_relu_mask(const Tensor& pre, double slope) {
  Tensor m(pre.shape());
  for (std::size_t i = 0; i < pre.size(); ++i) m[i] = pre[i] > 0.0 ? 1.0 : slope;
  return m;
}

Tensor clamp_mask(const Tensor& pre, double lo, double hi) {
  Tensor m(pre.shape());
  for (std::size_t i = 0; i < pre.size(); ++i) m[i] = (pre[i] > lo && pre[i] < hi) ? 1.0 : 0.0;
  return m;
}

Var leaky_relu(const Var& x, double slope) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = v > 0.0 ? v : slope * v;
  return tape_of(x).record(std::move(out), {x}, [x, slope](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(x);
    const Tensor& xv = x.value();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += xv[i] > 0.0 ? g[i] : slope * g[i];
  });
}

Var sigmoid(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = 1.0 / (1.0 + std::exp(-v));
  Tensor saved = out;
  return tape_of(x).record(std::move(out), {x}, [x, s = std::move(saved)](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s[i] * (1.0 - s[i]);
  });
}

Var clamp(const Var& x, double lo, double hi) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = std::clamp(v, lo, hi);
  return tape_of(x).record(std::move(out), {x}, [x, lo, hi](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(x);
    const Tensor& xv = x.value();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > lo && xv[i] < hi) gx[i] += g[i];
    }
  });
}

Var abs(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = std::abs(v);
  return tape_of(x).record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(x);
    const Tensor& xv = x.value();
    for (std::size_t i = 0; i < g.size(); ++i) {
      gx[i] += xv[i] > 0.0 ? g[i] : (xv[i] < 0.0 ? -g[i] : 0.0);
    }
  });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return tape_of(x).record(Tensor::scalar(s), {x}, [x](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(x);
    for (auto& v : gx.values()) v += g[0];
  });
}

Var mean(const Var& x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw Error(ErrorCode::EmptySet, "mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var row_norm(const Var& x) {
  const Tensor& xv = x.value();
  Tensor out = Tensor::matrix(xv.rows(), 1);
  out.mat() = xv.mat().rowwise().norm();
  Tensor saved = out;
  return tape_of(x).record(std::move(out), {x}, [x, n = std::move(saved)](Tape& t, const Tensor& g) {
    auto gx = t.grad(x).mat();
    const auto xv = x.value().mat();
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
      if (n[r] > 0.0) gx.row(r) += (g[r] / n[r]) * xv.row(r);
    }
  });
}

Var row_dot(const Var& a, const Var& b) {
  require(a.value().same_shape(b.value()) || a.value().size() == b.value().size(), "row_dot: shape");
  Tensor out = Tensor::matrix(a.value().rows(), 1);
  out.mat() = a.value().mat().cwiseProduct(b.value().mat()).rowwise().sum();
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Eigen::Map<const Eigen::VectorXd> gv(g.data(), g.size());
    if (wants(t, a)) t.grad(a).mat() += (b.value().mat().array().colwise() * gv.array()).matrix();
    if (wants(t, b)) t.grad(b).mat() += (a.value().mat().array().colwise() * gv.array()).matrix();
  });
}

Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Tensor& xv = x.value();
  const std::size_t n = xv.rows();
  const std::size_t c = xv.cols();
  if (n == 0) throw Error(ErrorCode::EmptySet, "instance_norm over an empty site set");
  require(gamma.value().size() == c && beta.value().size() == c, "instance_norm: affine size");
  const auto X = xv.mat();
  const Eigen::RowVectorXd mu = X.colwise().mean();
  RowMatrix centered = X.rowwise() - mu;
  const Eigen::RowVectorXd var = centered.array().square().colwise().sum() / static_cast<double>(n);
  const Eigen::RowVectorXd inv_std = (var.array() + eps).rsqrt();
  Tensor xhat = Tensor::matrix(n, c);
  xhat.mat() = centered.array().rowwise() * inv_std.array();
  Tensor out = Tensor::matrix(n, c);
  const Eigen::Map<const Eigen::RowVectorXd> gm(gamma.value().data(), c);
  const Eigen::Map<const Eigen::RowVectorXd> bt(beta.value().data(), c);
  out.mat() = (xhat.mat().array().rowwise() * gm.array()).rowwise() + bt.array();
  return tape_of(x).record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std](Tape& t, const Tensor& g) {
        const auto G = g.mat();
        const auto XH = xhat.mat();
        const Eigen::Index cols = G.cols();
        if (wants(t, gamma)) {
          Eigen::Map<Eigen::RowVectorXd>(t.grad(gamma).data(), cols) +=
              G.cwiseProduct(XH).colwise().sum();
        }
        if (wants(t, beta)) {
          Eigen::Map<Eigen::RowVectorXd>(t.grad(beta).data(), cols) += G.colwise().sum();
        }
        if (wants(t, x)) {
          const Eigen::Map<const Eigen::RowVectorXd> gm(gamma.value().data(), cols);
          const double inv_n = 1.0 / static_cast<double>(G.rows());
          const Eigen::RowVectorXd mean_g = G.colwise().sum() * inv_n;
          const Eigen::RowVectorXd mean_gx = G.cwiseProduct(XH).colwise().sum() * inv_n;
          const Eigen::RowVectorXd coef = gm.cwiseProduct(inv_std);
          auto gx = t.grad(x).mat();
          gx.array() += ((G.rowwise() - mean_g).array() -
                         XH.array().rowwise() * mean_gx.array())
                            .rowwise() *
                        coef.array();
        }
      });
}

Var segment_mean(const Var& x, std::span<const int> segment, std::size_t segments) {
  const Tensor& xv = x.value();
  require(segment.size() == xv.rows(), "segment_mean: one id per row");
  std::vector<double> counts(segments, 0.0);
  for (int s : segment) {
    if (s < 0 || static_cast<std::size_t>(s) >= segments) {
      throw Error(ErrorCode::InvalidArgument, "segment id out of range");
    }
    counts[s] += 1.0;
  }
  for (double c : counts) {
    if (c == 0.0) throw Error(ErrorCode::EmptySet, "mean pooling over an empty set");
  }
  const std::size_t c = xv.cols();
  Tensor out = Tensor::matrix(segments, c);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const double w = 1.0 / counts[segment[r]];
    const double* src = xv.data() + r * c;
    double* dst = out.data() + segment[r] * c;
    for (std::size_t j = 0; j < c; ++j) dst[j] += w * src[j];
  }
  std::vector<int> seg(segment.begin(), segment.end());
  return tape_of(x).record(std::move(out), {x},
                           [x, seg = std::move(seg), counts = std::move(counts)](Tape& t, const Tensor& g) {
                             Tensor& gx = t.grad(x);
                             const std::size_t c = gx.cols();
                             for (std::size_t r = 0; r < seg.size(); ++r) {
                               const double w = 1.0 / counts[seg[r]];
                               const double* src = g.data() + seg[r] * c;
                               double* dst = gx.data() + r * c;
                               for (std::size_t j = 0; j < c; ++j) dst[j] += w * src[j];
                             }
                           });
}

Var mean_pool(const Var& x) {
  const std::vector<int> seg(x.value().rows(), 0);
  if (seg.empty()) throw Error(ErrorCode::EmptySet, "mean pooling over an empty set");
  return segment_mean(x, seg, 1);
}

Var gather_rows(const Var& x, std::vector<int> index) {
  const Tensor& xv = x.value();
  const std::size_t c = xv.cols();
  Tensor out = Tensor::matrix(index.size(), c);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] < 0) continue;
    std::copy_n(xv.data() + static_cast<std::size_t>(index[r]) * c, c, out.data() + r * c);
  }
  return tape_of(x).record(std::move(out), {x}, [x, idx = std::move(index)](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(x);
    const std::size_t c = gx.cols();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      if (idx[r] < 0) continue;
      const double* src = g.data() + r * c;
      double* dst = gx.data() + static_cast<std::size_t>(idx[r]) * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
}

Var weighted_gather(const Var& x, std::vector<int> index, std::vector<double> weights,
                    std::size_t k) {
  require(index.size() == weights.size() && k > 0 && index.size() % k == 0,
          "weighted_gather: index/weight layout");
  const Tensor& xv = x.value();
  const std::size_t c = xv.cols();
  const std::size_t n = index.size() / k;
  Tensor out = Tensor::matrix(n, c);
  for (std::size_t r = 0; r < n; ++r) {
    double* dst = out.data() + r * c;
    for (std::size_t j = 0; j < k; ++j) {
      const int i = index[r * k + j];
      if (i < 0) continue;
      const double w = weights[r * k + j];
      const double* src = xv.data() + static_cast<std::size_t>(i) * c;
      for (std::size_t q = 0; q < c; ++q) dst[q] += w * src[q];
    }
  }
  return tape_of(x).record(
      std::move(out), {x},
      [x, idx = std::move(index), w = std::move(weights), k](Tape& t, const Tensor& g) {
        Tensor& gx = t.grad(x);
        const std::size_t c = gx.cols();
        const std::size_t n = idx.size() / k;
        for (std::size_t r = 0; r < n; ++r) {
          const double* src = g.data() + r * c;
          for (std::size_t j = 0; j < k; ++j) {
            const int i = idx[r * k + j];
            if (i < 0) continue;
            const double wj = w[r * k + j];
            double* dst = gx.data() + static_cast<std::size_t>(i) * c;
            for (std::size_t q = 0; q < c; ++q) dst[q] += wj * src[q];
          }
        }
      });
}

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols: nothing to concatenate");
  const std::size_t n = parts[0].value().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require(p.value().rows() == n, "concat_cols: row counts differ");
    widths.push_back(p.value().cols());
    total += widths.back();
  }
  Tensor out = Tensor::matrix(n, total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    out.mat().middleCols(static_cast<Eigen::Index>(offset), static_cast<Eigen::Index>(widths[k])) =
        parts[k].value().mat();
    offset += widths[k];
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape_of(parts[0]).record(std::move(out), parts,
                                  [inputs, widths](Tape& t, const Tensor& g) {
                                    std::size_t offset = 0;
                                    for (std::size_t k = 0; k < inputs.size(); ++k) {
                                      if (wants(t, inputs[k])) {
                                        t.grad(inputs[k]).mat() += g.mat().middleCols(
                                            static_cast<Eigen::Index>(offset),
                                            static_cast<Eigen::Index>(widths[k]));
                                      }
                                      offset += widths[k];
                                    }
                                  });
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows: nothing to concatenate");
  const std::size_t c = parts[0].value().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    require(p.value().cols() == c || p.value().rows() == 0, "concat_rows: column counts differ");
    total += p.value().rows();
  }
  Tensor out = Tensor::matrix(total, c);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy_n(p.value().data(), p.value().size(), out.data() + offset);
    offset += p.value().size();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape_of(parts[0]).record(std::move(out), parts, [inputs](Tape& t, const Tensor& g) {
    std::size_t offset = 0;
    for (const auto& in : inputs) {
      const std::size_t n = in.value().size();
      if (wants(t, in)) {
        Tensor& gi = t.grad(in);
        for (std::size_t i = 0; i < n; ++i) gi[i] += g[offset + i];
      }
      offset += n;
    }
  });
}

Var bce_sum(const Var& p, std::span<const double> labels, double eps) {
  const Tensor& pv = p.value();
  require(pv.size() == labels.size(), "bce: one label per prediction");
  double total = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double q = std::clamp(pv[i], eps, 1.0 - eps);
    total -= labels[i] * std::log(q) + (1.0 - labels[i]) * std::log(1.0 - q);
  }
  std::vector<double> y(labels.begin(), labels.end());
  return tape_of(p).record(Tensor::scalar(total), {p},
                           [p, y = std::move(y), eps](Tape& t, const Tensor& g) {
                             Tensor& gp = t.grad(p);
                             const Tensor& pv = p.value();
                             for (std::size_t i = 0; i < y.size(); ++i) {
                               if (pv[i] <= eps || pv[i] >= 1.0 - eps) continue;
                               const double q = pv[i];
                               gp[i] += g[0] * (-y[i] / q + (1.0 - y[i]) / (1.0 - q));
                             }
                           });
}

std::size_t Rulebook::pair_count() const {
  std::size_t n = 0;
  for (const auto& t : taps) n += t.size();
  return n;
}

Var rulebook_conv(const Var& x, const Var& weight, std::shared_ptr<const Rulebook> rules) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  require(wv.shape().size() == 3 && wv.shape()[0] == rules->taps.size(),
          "rulebook_conv: kernel must be taps x Cin x Cout");
  const auto cin = static_cast<Eigen::Index>(wv.shape()[1]);
  const auto cout = static_cast<Eigen::Index>(wv.shape()[2]);
  require(static_cast<Eigen::Index>(xv.cols()) == cin, "rulebook_conv: input channels");
  Tensor out = Tensor::matrix(rules->out_rows, static_cast<std::size_t>(cout));
  auto Y = out.mat();
  const auto X = xv.mat();
  RowMatrix gathered;
  RowMatrix product;
  for (std::size_t k = 0; k < rules->taps.size(); ++k) {
    const auto& pairs = rules->taps[k];
    if (pairs.empty()) continue;
    const Eigen::Map<const RowMatrix> W(wv.data() + k * cin * cout, cin, cout);
    gathered.resize(static_cast<Eigen::Index>(pairs.size()), cin);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      gathered.row(static_cast<Eigen::Index>(i)) = X.row(pairs[i].first);
    }
    product.noalias() = gathered * W;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      Y.row(pairs[i].second) += product.row(static_cast<Eigen::Index>(i));
    }
  }
  return tape_of(x).record(std::move(out), {x, weight}, [x, weight, rules](Tape& t, const Tensor& g) {
    const Tensor& wv = weight.value();
    const auto cin = static_cast<Eigen::Index>(wv.shape()[1]);
    const auto cout = static_cast<Eigen::Index>(wv.shape()[2]);
    const auto X = x.value().mat();
    const auto G = g.mat();
    const bool need_x = wants(t, x);
    const bool need_w = wants(t, weight);
    RowMatrix gathered_g;
    RowMatrix gathered_x;
    RowMatrix dx;
    for (std::size_t k = 0; k < rules->taps.size(); ++k) {
      const auto& pairs = rules->taps[k];
      if (pairs.empty()) continue;
      const auto n = static_cast<Eigen::Index>(pairs.size());
      gathered_g.resize(n, cout);
      for (Eigen::Index i = 0; i < n; ++i) gathered_g.row(i) = G.row(pairs[i].second);
      if (need_w) {
        gathered_x.resize(n, cin);
        for (Eigen::Index i = 0; i < n; ++i) gathered_x.row(i) = X.row(pairs[i].first);
        Eigen::Map<RowMatrix> dW(t.grad(weight).data() + k * cin * cout, cin, cout);
        dW.noalias() += gathered_x.transpose() * gathered_g;
      }
      if (need_x) {
        const Eigen::Map<const RowMatrix> W(wv.data() + k * cin * cout, cin, cout);
        dx.noalias() = gathered_g * W.transpose();
        auto gx = t.grad(x).mat();
        for (Eigen::Index i = 0; i < n; ++i) gx.row(pairs[i].first) += dx.row(i);
      }
    }
  });
}

}  // namespace circle::tape
