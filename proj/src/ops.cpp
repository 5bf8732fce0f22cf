#include "watchped/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace watchped::ad {
namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                                      " vs " + shape_string(b.shape()));
}

void require_rank(const Var& a, std::size_t r, const char* op) {
  require(a.value().rank() == r, std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                                     shape_string(a.shape()));
}

// Accumulates into a parent's gradient only when it participates in backprop.
template <typename Expr>
void accumulate(const Var& p, const Expr& g) {
  if (p.requires_grad()) p.node()->grad_buffer().data() += g;
}

}  // namespace

Index conv_output_extent(Index in, Index kernel, Index stride, Index padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape(), a.value().data() + b.value().data());
  return make_node(std::move(out), {a, b}, [](Node& n) {
    accumulate(n.parents[0], n.grad.data());
    accumulate(n.parents[1], n.grad.data());
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape(), a.value().data() - b.value().data());
  return make_node(std::move(out), {a, b}, [](Node& n) {
    accumulate(n.parents[0], n.grad.data());
    accumulate(n.parents[1], -n.grad.data());
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape(), a.value().data().cwiseProduct(b.value().data()));
  return make_node(std::move(out), {a, b}, [](Node& n) {
    const auto& av = n.parents[0].value().data();
    const auto& bv = n.parents[1].value().data();
    accumulate(n.parents[0], n.grad.data().cwiseProduct(bv));
    accumulate(n.parents[1], n.grad.data().cwiseProduct(av));
  });
}

Var scale(const Var& a, double s) {
  Tensor out(a.shape(), a.value().data() * s);
  return make_node(std::move(out), {a}, [s](Node& n) { accumulate(n.parents[0], n.grad.data() * s); });
}

Var relu(const Var& a) {
  Tensor out(a.shape(), a.value().data().cwiseMax(0.0));
  return make_node(std::move(out), {a}, [](Node& n) {
    const auto& x = n.parents[0].value().data();
    accumulate(n.parents[0], (x.array() > 0.0).select(n.grad.data(), 0.0).matrix());
  });
}

Var sigmoid(const Var& a) {
  Tensor out(a.shape());
  out.data() = a.value().data().unaryExpr([](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
  return make_node(std::move(out), {a}, [](Node& n) {
    const auto& y = n.value.data().array();
    accumulate(n.parents[0], (n.grad.data().array() * y * (1.0 - y)).matrix());
  });
}

Var tanh(const Var& a) {
  Tensor out(a.shape(), a.value().data().array().tanh().matrix());
  return make_node(std::move(out), {a}, [](Node& n) {
    const auto& y = n.value.data().array();
    accumulate(n.parents[0], (n.grad.data().array() * (1.0 - y * y)).matrix());
  });
}

Var square(const Var& a) {
  Tensor out(a.shape(), a.value().data().array().square().matrix());
  return make_node(std::move(out), {a}, [](Node& n) {
    accumulate(n.parents[0], 2.0 * n.grad.data().cwiseProduct(n.parents[0].value().data()));
  });
}

Var sum(const Var& a) {
  Tensor out = Tensor::constant({1}, a.value().data().sum());
  return make_node(std::move(out), {a}, [](Node& n) {
    accumulate(n.parents[0], VectorXd::Constant(n.parents[0].value().size(), n.grad[0]));
  });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var matvec(const Var& w, const Var& x) {
  require_rank(w, 2, "matvec");
  require_rank(x, 1, "matvec");
  require(w.shape()[1] == x.shape()[0],
          "matvec: " + shape_string(w.shape()) + " cannot multiply " + shape_string(x.shape()));
  Tensor out({w.shape()[0]}, w.value().matrix() * x.value().data());
  return make_node(std::move(out), {w, x}, [](Node& n) {
    const Var& w = n.parents[0];
    const Var& x = n.parents[1];
    if (w.requires_grad()) {
      w.node()->grad_buffer().matrix().noalias() += n.grad.data() * x.value().data().transpose();
    }
    accumulate(x, w.value().matrix().transpose() * n.grad.data());
  });
}

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  require(a.shape()[1] == b.shape()[0],
          "matmul: " + shape_string(a.shape()) + " cannot multiply " + shape_string(b.shape()));
  Tensor out({a.shape()[0], b.shape()[1]});
  out.matrix().noalias() = a.value().matrix() * b.value().matrix();
  return make_node(std::move(out), {a, b}, [](Node& n) {
    const Var& a = n.parents[0];
    const Var& b = n.parents[1];
    if (a.requires_grad()) {
      a.node()->grad_buffer().matrix().noalias() += n.grad.matrix() * b.value().matrix().transpose();
    }
    if (b.requires_grad()) {
      b.node()->grad_buffer().matrix().noalias() += a.value().matrix().transpose() * n.grad.matrix();
    }
  });
}

Var transpose(const Var& a) {
  require_rank(a, 2, "transpose");
  Tensor out({a.shape()[1], a.shape()[0]});
  out.matrix() = a.value().matrix().transpose();
  return make_node(std::move(out), {a}, [](Node& n) {
    const Var& a = n.parents[0];
    if (a.requires_grad()) a.node()->grad_buffer().matrix() += n.grad.matrix().transpose();
  });
}

Var add_row_bias(const Var& a, const Var& bias) {
  require_rank(a, 2, "add_row_bias");
  require_rank(bias, 1, "add_row_bias");
  require(a.shape()[1] == bias.shape()[0],
          "add_row_bias: " + shape_string(a.shape()) + " vs bias " + shape_string(bias.shape()));
  Tensor out = a.value();
  out.matrix().rowwise() += bias.value().data().transpose();
  return make_node(std::move(out), {a, bias}, [](Node& n) {
    accumulate(n.parents[0], n.grad.data());
    accumulate(n.parents[1], n.grad.matrix().colwise().sum().transpose());
  });
}

Var reshape(const Var& a, Shape shape) {
  require(shape_numel(shape) == a.value().size(),
          "reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  Tensor out(std::move(shape), a.value().data());
  return make_node(std::move(out), {a}, [](Node& n) { accumulate(n.parents[0], n.grad.data()); });
}

Var concat(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat: no inputs");
  Index total = 0;
  for (const auto& p : parts) {
    require_rank(p, 1, "concat");
    total += p.value().size();
  }
  Tensor out({total});
  Index off = 0;
  for (const auto& p : parts) {
    out.data().segment(off, p.value().size()) = p.value().data();
    off += p.value().size();
  }
  return make_node(std::move(out), parts, [](Node& n) {
    Index off = 0;
    for (const auto& p : n.parents) {
      const Index len = p.value().size();
      accumulate(p, n.grad.data().segment(off, len));
      off += len;
    }
  });
}

Var concat_cols(const Var& a, const Var& b) {
  require_rank(a, 2, "concat_cols");
  require_rank(b, 2, "concat_cols");
  require(a.shape()[0] == b.shape()[0],
          "concat_cols: row mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  const Index p = a.shape()[1];
  const Index q = b.shape()[1];
  Tensor out({a.shape()[0], p + q});
  out.matrix().leftCols(p) = a.value().matrix();
  out.matrix().rightCols(q) = b.value().matrix();
  return make_node(std::move(out), {a, b}, [p, q](Node& n) {
    const Var& a = n.parents[0];
    const Var& b = n.parents[1];
    if (a.requires_grad()) a.node()->grad_buffer().matrix() += n.grad.matrix().leftCols(p);
    if (b.requires_grad()) b.node()->grad_buffer().matrix() += n.grad.matrix().rightCols(q);
  });
}

Var stack_rows(const std::vector<Var>& rows) {
  require(!rows.empty(), "stack_rows: no inputs");
  const Index d = rows.front().value().size();
  for (const auto& r : rows) {
    require_rank(r, 1, "stack_rows");
    require(r.value().size() == d, "stack_rows: rows of unequal length");
  }
  Tensor out({static_cast<Index>(rows.size()), d});
  for (std::size_t i = 0; i < rows.size(); ++i) out.matrix().row(i) = rows[i].value().data().transpose();
  return make_node(std::move(out), rows, [](Node& n) {
    for (std::size_t i = 0; i < n.parents.size(); ++i) {
      accumulate(n.parents[i], n.grad.matrix().row(i).transpose());
    }
  });
}

Var row(const Var& a, Index i) {
  require_rank(a, 2, "row");
  if (i < 0 || i >= a.shape()[0]) throw std::out_of_range("row index out of range");
  Tensor out({a.shape()[1]}, a.value().matrix().row(i).transpose());
  return make_node(std::move(out), {a}, [i](Node& n) {
    const Var& a = n.parents[0];
    if (a.requires_grad()) a.node()->grad_buffer().matrix().row(i) += n.grad.data().transpose();
  });
}

Var broadcast_rows(const Var& v, Index rows) {
  require_rank(v, 1, "broadcast_rows");
  Tensor out({rows, v.value().size()});
  out.matrix().rowwise() = v.value().data().transpose();
  return make_node(std::move(out), {v}, [](Node& n) {
    accumulate(n.parents[0], n.grad.matrix().colwise().sum().transpose());
  });
}

Var pad_to(const Var& v, Index length) {
  require_rank(v, 1, "pad_to");
  const Index len = v.value().size();
  require(length >= len, "pad_to: target shorter than input");
  if (length == len) return v;
  Tensor out({length});
  out.data().head(len) = v.value().data();
  return make_node(std::move(out), {v}, [len](Node& n) { accumulate(n.parents[0], n.grad.data().head(len)); });
}

Var scale_rows(const Var& a, const Tensor& weights) {
  require_rank(a, 2, "scale_rows");
  require(weights.size() == a.shape()[0], "scale_rows: weight count does not match rows");
  Tensor out = a.value();
  out.matrix().array().colwise() *= weights.data().array();
  VectorXd w = weights.data();
  return make_node(std::move(out), {a}, [w](Node& n) {
    const Var& a = n.parents[0];
    if (!a.requires_grad()) return;
    MatrixXdR g = n.grad.matrix();
    g.array().colwise() *= w.array();
    a.node()->grad_buffer().matrix() += g;
  });
}

Var softmax(const Var& logits) {
  require_rank(logits, 1, "softmax");
  const auto& x = logits.value().data();
  VectorXd e = (x.array() - x.maxCoeff()).exp();
  Tensor out({x.size()}, e / e.sum());
  return make_node(std::move(out), {logits}, [](Node& n) {
    const auto& s = n.value.data();
    const double gs = n.grad.data().dot(s);
    accumulate(n.parents[0], (s.array() * (n.grad.data().array() - gs)).matrix());
  });
}

Var dropout(const Var& a, const ForwardContext& ctx) {
  if (!ctx.training || ctx.dropout_rate <= 0.0) return a;
  if (ctx.rng == nullptr) throw std::invalid_argument("dropout in training mode needs a seeded rng");
  const double keep = 1.0 - ctx.dropout_rate;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor mask(a.shape());
  for (Index i = 0; i < mask.size(); ++i) mask[i] = u(*ctx.rng) < keep ? 1.0 / keep : 0.0;
  return mul(a, Var::constant(std::move(mask)));
}

namespace {

// Unfolds [C,H,W] into [C*kh*kw, Ho*Wo] so the convolution is a single GEMM.
MatrixXdR im2col(const Tensor& in, Index kh, Index kw, Index stride, Index pad, Index ho, Index wo) {
  const Index c = in.dim(0), h = in.dim(1), w = in.dim(2);
  MatrixXdR cols = MatrixXdR::Zero(c * kh * kw, ho * wo);
  const double* src = in.data().data();
  for (Index ch = 0; ch < c; ++ch) {
    for (Index i = 0; i < kh; ++i) {
      for (Index j = 0; j < kw; ++j) {
        double* dst = cols.row((ch * kh + i) * kw + j).data();
        for (Index y = 0; y < ho; ++y) {
          const Index sy = y * stride + i - pad;
          if (sy < 0 || sy >= h) continue;
          const double* srow = src + (ch * h + sy) * w;
          for (Index x = 0; x < wo; ++x) {
            const Index sx = x * stride + j - pad;
            if (sx >= 0 && sx < w) dst[y * wo + x] = srow[sx];
          }
        }
      }
    }
  }
  return cols;
}

void col2im_accumulate(const MatrixXdR& cols, Tensor& grad, Index kh, Index kw, Index stride, Index pad,
                       Index ho, Index wo) {
  const Index c = grad.dim(0), h = grad.dim(1), w = grad.dim(2);
  double* dst = grad.data().data();
  for (Index ch = 0; ch < c; ++ch) {
    for (Index i = 0; i < kh; ++i) {
      for (Index j = 0; j < kw; ++j) {
        const double* src = cols.row((ch * kh + i) * kw + j).data();
        for (Index y = 0; y < ho; ++y) {
          const Index sy = y * stride + i - pad;
          if (sy < 0 || sy >= h) continue;
          double* drow = dst + (ch * h + sy) * w;
          for (Index x = 0; x < wo; ++x) {
            const Index sx = x * stride + j - pad;
            if (sx >= 0 && sx < w) drow[sx] += src[y * wo + x];
          }
        }
      }
    }
  }
}

Var conv2d_impl(const Var& input, const Var& kernels, const Var* bias, Index stride, Index padding) {
  require_rank(input, 3, "conv2d");
  require(kernels.value().rank() == 4, "conv2d: kernels must be [C_out,C_in,kH,kW], got " +
                                           shape_string(kernels.shape()));
  const Index cin = input.shape()[0], h = input.shape()[1], w = input.shape()[2];
  const Index cout = kernels.shape()[0], kh = kernels.shape()[2], kw = kernels.shape()[3];
  require(kernels.shape()[1] == cin, "conv2d: input has " + std::to_string(cin) + " channels, kernels expect " +
                                         std::to_string(kernels.shape()[1]));
  require(stride >= 1, "conv2d: stride must be >= 1");
  require(padding >= 0, "conv2d: padding must be >= 0");
  require(kh <= h + 2 * padding && kw <= w + 2 * padding,
          "conv2d: kernel " + shape_string(kernels.shape()) + " larger than padded input " +
              shape_string(input.shape()));
  if (bias) {
    require(bias->value().rank() == 1 && bias->value().size() == cout,
            "conv2d: bias must be [" + std::to_string(cout) + "], got " + shape_string(bias->shape()));
  }
  const Index ho = conv_output_extent(h, kh, stride, padding);
  const Index wo = conv_output_extent(w, kw, stride, padding);

  MatrixXdR cols = im2col(input.value(), kh, kw, stride, padding, ho, wo);
  Tensor out({cout, ho, wo});
  Eigen::Map<MatrixXdR> out_map(out.data().data(), cout, ho * wo);
  out_map.noalias() = kernels.value().as_matrix(cout) * cols;
  if (bias) out_map.colwise() += bias->value().data();

  std::vector<Var> parents{input, kernels};
  if (bias) parents.push_back(*bias);
  const bool keep_cols = kernels.requires_grad();
  auto saved = std::make_shared<MatrixXdR>(keep_cols ? std::move(cols) : MatrixXdR());
  return make_node(std::move(out), std::move(parents), [=](Node& n) {
    const Var& in = n.parents[0];
    const Var& k = n.parents[1];
    Eigen::Map<const MatrixXdR> g(n.grad.data().data(), cout, ho * wo);
    if (k.requires_grad()) {
      Eigen::Map<MatrixXdR> gk(k.node()->grad_buffer().data().data(), cout, cin * kh * kw);
      gk.noalias() += g * saved->transpose();
    }
    if (n.parents.size() > 2) accumulate(n.parents[2], g.rowwise().sum());
    if (in.requires_grad()) {
      MatrixXdR dcols = k.value().as_matrix(cout).transpose() * g;
      col2im_accumulate(dcols, in.node()->grad_buffer(), kh, kw, stride, padding, ho, wo);
    }
  });
}

}  // namespace

Var conv2d(const Var& input, const Var& kernels, Index stride, Index padding) {
  return conv2d_impl(input, kernels, nullptr, stride, padding);
}

Var conv2d(const Var& input, const Var& kernels, const Var& bias, Index stride, Index padding) {
  return conv2d_impl(input, kernels, &bias, stride, padding);
}

Var pool2d(const Var& input, PoolMode mode, Index kh, Index kw) {
  require_rank(input, 3, "pool2d");
  const Index c = input.shape()[0], h = input.shape()[1], w = input.shape()[2];
  require(kh >= 1 && kw >= 1, "pool2d: kernel must be positive");
  require(kh <= h && kw <= w, "pool2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                                  " larger than input " + shape_string(input.shape()));
  const Index ho = h / kh, wo = w / kw;
  Tensor out({c, ho, wo});
  std::vector<Index> argmax;
  if (mode == PoolMode::kMax) argmax.resize(static_cast<std::size_t>(c * ho * wo));
  const auto& x = input.value().data();
  for (Index ch = 0; ch < c; ++ch) {
    for (Index y = 0; y < ho; ++y) {
      for (Index xo = 0; xo < wo; ++xo) {
        const Index o = (ch * ho + y) * wo + xo;
        double acc = mode == PoolMode::kMax ? -std::numeric_limits<double>::infinity() : 0.0;
        Index best = -1;
        for (Index i = 0; i < kh; ++i) {
          for (Index j = 0; j < kw; ++j) {
            const Index src = (ch * h + y * kh + i) * w + xo * kw + j;
            if (mode == PoolMode::kMax) {
              if (x[src] > acc) {
                acc = x[src];
                best = src;
              }
            } else {
              acc += x[src];
            }
          }
        }
        if (mode == PoolMode::kMax) {
          out[o] = acc;
          argmax[static_cast<std::size_t>(o)] = best;
        } else {
          out[o] = acc / static_cast<double>(kh * kw);
        }
      }
    }
  }
  return make_node(std::move(out), {input}, [=, argmax = std::move(argmax)](Node& n) {
    const Var& in = n.parents[0];
    if (!in.requires_grad()) return;
    auto& g = in.node()->grad_buffer().data();
    if (mode == PoolMode::kMax) {
      for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += n.grad[static_cast<Index>(o)];
      return;
    }
    const double inv = 1.0 / static_cast<double>(kh * kw);
    for (Index ch = 0; ch < c; ++ch) {
      for (Index y = 0; y < ho; ++y) {
        for (Index xo = 0; xo < wo; ++xo) {
          const double go = n.grad[(ch * ho + y) * wo + xo] * inv;
          for (Index i = 0; i < kh; ++i) {
            for (Index j = 0; j < kw; ++j) g[(ch * h + y * kh + i) * w + xo * kw + j] += go;
          }
        }
      }
    }
  });
}

Var conv1d(const Var& input, const Var& kernels, const Var& bias) {
  require_rank(input, 2, "conv1d");
  require(kernels.value().rank() == 3, "conv1d: kernels must be [C_out,C_in,k], got " +
                                           shape_string(kernels.shape()));
  const Index c = input.shape()[0], len = input.shape()[1];
  const Index o = kernels.shape()[0], k = kernels.shape()[2];
  Var x = reshape(input, {c, 1, len});
  Var kk = reshape(kernels, {o, kernels.shape()[1], 1, k});
  Var y = conv2d(x, kk, bias, 1, 0);
  return reshape(y, {o, y.shape()[2]});
}

Var max_pool1d(const Var& input, Index k) {
  require_rank(input, 2, "max_pool1d");
  const Index c = input.shape()[0], len = input.shape()[1];
  Var y = pool2d(reshape(input, {c, 1, len}), PoolMode::kMax, 1, k);
  return reshape(y, {c, y.shape()[2]});
}

Var global_average(const Var& input) {
  require(input.value().rank() >= 2, "global_average: need [C,...] input");
  const Index c = input.shape()[0];
  const Index per = input.value().size() / c;
  Tensor out({c}, input.value().as_matrix(c).rowwise().mean());
  return make_node(std::move(out), {input}, [c, per](Node& n) {
    const Var& in = n.parents[0];
    if (!in.requires_grad()) return;
    Eigen::Map<MatrixXdR> g(in.node()->grad_buffer().data().data(), c, per);
    g.colwise() += n.grad.data() / static_cast<double>(per);
  });
}

Var bce_loss(const Var& probability, int label) {
  require(probability.value().size() == 1, "bce_loss: probability must be a scalar");
  if (label != 0 && label != 1) throw std::invalid_argument("bce_loss: label must be 0 or 1");
  const double p = probability.value()[0];
  const double pc = std::clamp(p, kLossEpsilon, 1.0 - kLossEpsilon);
  const double y = label;
  const double loss = -(y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc));
  const bool clamped = pc != p;
  return make_node(Tensor::constant({1}, loss), {probability}, [=](Node& n) {
    if (clamped) return;
    const double d = -(y / pc - (1.0 - y) / (1.0 - pc));
    accumulate(n.parents[0], VectorXd::Constant(1, d * n.grad[0]));
  });
}

Var sparse_cce_loss(const Var& logits, Index class_index) {
  require_rank(logits, 1, "sparse_cce_loss");
  const Index k = logits.value().size();
  require(k >= 2, "sparse_cce_loss: need at least 2 classes");
  if (class_index < 0 || class_index >= k) {
    throw std::out_of_range("sparse_cce_loss: class index " + std::to_string(class_index) +
                            " outside [0," + std::to_string(k) + ")");
  }
  const auto& x = logits.value().data();
  const double mx = x.maxCoeff();
  const VectorXd e = (x.array() - mx).exp();
  const double lse = mx + std::log(e.sum());
  const double log_p = x[class_index] - lse;
  const bool clamped = log_p < std::log(kLossEpsilon);
  const double loss = clamped ? -std::log(kLossEpsilon) : -log_p;
  VectorXd probs = e / e.sum();
  return make_node(Tensor::constant({1}, loss), {logits}, [=](Node& n) {
    if (clamped) return;
    VectorXd g = probs;
    g[class_index] -= 1.0;
    accumulate(n.parents[0], g * n.grad[0]);
  });
}

Var activate(const Var& a, Activation act) {
  switch (act) {
    case Activation::kNone: return a;
    case Activation::kRelu: return relu(a);
    case Activation::kSigmoid: return sigmoid(a);
    case Activation::kTanh: return tanh(a);
  }
  return a;
}

Var dense(const Var& x, const Var& w, const Var& b, Activation act) {
  require_rank(w, 2, "dense");
  require(b.value().rank() == 1 && b.shape()[0] == w.shape()[0],
          "dense: bias " + shape_string(b.shape()) + " does not match weights " + shape_string(w.shape()));
  return activate(add(matvec(w, x), b), act);
}

}  // namespace watchped::ad
