#include "watchped/layers.hpp"

#include <cmath>
#include <memory>

namespace watchped::ad {
namespace {

VectorXd logistic(const VectorXd& a) {
  return a.unaryExpr([](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
}

void add_grad(const Var& v, const MatrixXdR& g) {
  if (v.requires_grad()) v.node()->grad_buffer().data() += Eigen::Map<const VectorXd>(g.data(), g.size());
}

void add_grad(const Var& v, const VectorXd& g) {
  if (v.requires_grad()) v.node()->grad_buffer().data() += g;
}

}  // namespace

Tensor glorot_uniform(Shape shape, Index fan_in, Index fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-limit, limit);
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

GruParams GruParams::create(ParamSet& params, const std::string& prefix, Index input_size, Index hidden_size,
                            std::mt19937_64& rng) {
  for (const char* gate : {"z", "r", "n"}) {
    const std::string g(gate);
    params.add(prefix + ".w_" + g, glorot_uniform({hidden_size, input_size}, input_size, hidden_size, rng));
    params.add(prefix + ".u_" + g, glorot_uniform({hidden_size, hidden_size}, hidden_size, hidden_size, rng));
    params.add(prefix + ".b_" + g, Tensor::zeros({hidden_size}));
  }
  return bind(params, prefix);
}

GruParams GruParams::bind(const ParamSet& params, const std::string& prefix) {
  GruParams p;
  p.w_z = params.at(prefix + ".w_z");
  p.u_z = params.at(prefix + ".u_z");
  p.b_z = params.at(prefix + ".b_z");
  p.w_r = params.at(prefix + ".w_r");
  p.u_r = params.at(prefix + ".u_r");
  p.b_r = params.at(prefix + ".b_r");
  p.w_n = params.at(prefix + ".w_n");
  p.u_n = params.at(prefix + ".u_n");
  p.b_n = params.at(prefix + ".b_n");
  p.hidden_size = p.w_z.shape()[0];
  p.input_size = p.w_z.shape()[1];
  return p;
}

Var gru_forward(const Var& sequence, const GruParams& p) {
  return gru_forward(sequence, p, Var::constant(Tensor::zeros({p.hidden_size})));
}

// The whole recurrence is one graph node with a hand-written BPTT backward;
// the gradient-check suite pins it against finite differences.
Var gru_forward(const Var& sequence, const GruParams& p, const Var& h0) {
  if (sequence.value().rank() != 2) {
    throw ShapeError("gru_forward: sequence must be [T,input], got " + shape_string(sequence.shape()));
  }
  const Index steps = sequence.shape()[0];
  const Index in = sequence.shape()[1];
  const Index hid = p.hidden_size;
  if (in != p.input_size) {
    throw ShapeError("gru_forward: input width " + std::to_string(in) + " but GRU expects " +
                     std::to_string(p.input_size));
  }
  if (h0.value().size() != hid) throw ShapeError("gru_forward: h0 must have length " + std::to_string(hid));

  const auto x = sequence.value().matrix();
  // Input projections for all steps at once: [T,H].
  const MatrixXdR xz = x * p.w_z.value().matrix().transpose();
  const MatrixXdR xr = x * p.w_r.value().matrix().transpose();
  const MatrixXdR xn = x * p.w_n.value().matrix().transpose();

  struct Saved {
    MatrixXdR z, r, n, h_prev;
  };
  auto s = std::make_shared<Saved>();
  s->z.resize(steps, hid);
  s->r.resize(steps, hid);
  s->n.resize(steps, hid);
  s->h_prev.resize(steps, hid);

  Tensor out({steps, hid});
  VectorXd h = h0.value().data();
  const auto uz = p.u_z.value().matrix();
  const auto ur = p.u_r.value().matrix();
  const auto un = p.u_n.value().matrix();
  const auto& bz = p.b_z.value().data();
  const auto& br = p.b_r.value().data();
  const auto& bn = p.b_n.value().data();
  for (Index t = 0; t < steps; ++t) {
    s->h_prev.row(t) = h.transpose();
    const VectorXd z = logistic(xz.row(t).transpose() + uz * h + bz);
    const VectorXd r = logistic(xr.row(t).transpose() + ur * h + br);
    const VectorXd n = (xn.row(t).transpose() + un * r.cwiseProduct(h) + bn).array().tanh().matrix();
    h = (1.0 - z.array()).matrix().cwiseProduct(n) + z.cwiseProduct(h);
    s->z.row(t) = z.transpose();
    s->r.row(t) = r.transpose();
    s->n.row(t) = n.transpose();
    out.matrix().row(t) = h.transpose();
  }

  std::vector<Var> parents{sequence, h0, p.w_z, p.u_z, p.b_z, p.w_r, p.u_r, p.b_r, p.w_n, p.u_n, p.b_n};
  return make_node(std::move(out), std::move(parents), [s, steps, in, hid](Node& node) {
    const auto& par = node.parents;
    const auto x = par[0].value().matrix();
    const auto uz = par[3].value().matrix();
    const auto ur = par[6].value().matrix();
    const auto un = par[9].value().matrix();
    const auto wz = par[2].value().matrix();
    const auto wr = par[5].value().matrix();
    const auto wn = par[8].value().matrix();

    MatrixXdR dx = MatrixXdR::Zero(steps, in);
    MatrixXdR dwz = MatrixXdR::Zero(hid, in), dwr = dwz, dwn = dwz;
    MatrixXdR duz = MatrixXdR::Zero(hid, hid), dur = duz, dun = duz;
    VectorXd dbz = VectorXd::Zero(hid), dbr = dbz, dbn = dbz;
    VectorXd dh_next = VectorXd::Zero(hid);
    const auto g = node.grad.matrix();

    for (Index t = steps - 1; t >= 0; --t) {
      const VectorXd z = s->z.row(t).transpose();
      const VectorXd r = s->r.row(t).transpose();
      const VectorXd n = s->n.row(t).transpose();
      const VectorXd hp = s->h_prev.row(t).transpose();
      const VectorXd dh = g.row(t).transpose() + dh_next;
      const VectorXd xt = x.row(t).transpose();

      const VectorXd dn = dh.cwiseProduct((1.0 - z.array()).matrix());
      const VectorXd dz = dh.cwiseProduct(hp - n);
      VectorXd dhp = dh.cwiseProduct(z);

      const VectorXd dan = dn.array() * (1.0 - n.array().square());
      const VectorXd rh = r.cwiseProduct(hp);
      dwn.noalias() += dan * xt.transpose();
      dun.noalias() += dan * rh.transpose();
      dbn += dan;
      const VectorXd drh = un.transpose() * dan;
      const VectorXd dr = drh.cwiseProduct(hp);
      dhp += drh.cwiseProduct(r);

      const VectorXd daz = dz.array() * z.array() * (1.0 - z.array());
      const VectorXd dar = dr.array() * r.array() * (1.0 - r.array());
      dwz.noalias() += daz * xt.transpose();
      duz.noalias() += daz * hp.transpose();
      dbz += daz;
      dwr.noalias() += dar * xt.transpose();
      dur.noalias() += dar * hp.transpose();
      dbr += dar;
      dhp.noalias() += uz.transpose() * daz + ur.transpose() * dar;

      dx.row(t) = (wz.transpose() * daz + wr.transpose() * dar + wn.transpose() * dan).transpose();
      dh_next = dhp;
    }

    add_grad(par[0], dx);
    add_grad(par[1], dh_next);
    add_grad(par[2], dwz);
    add_grad(par[3], duz);
    add_grad(par[4], dbz);
    add_grad(par[5], dwr);
    add_grad(par[6], dur);
    add_grad(par[7], dbr);
    add_grad(par[8], dwn);
    add_grad(par[9], dun);
    add_grad(par[10], dbn);
  });
}

AttentionParams AttentionParams::create(ParamSet& params, const std::string& prefix, Index d, Index attention_dim,
                                        std::mt19937_64& rng) {
  params.add(prefix + ".w", glorot_uniform({attention_dim, d}, d, attention_dim, rng));
  params.add(prefix + ".v", glorot_uniform({attention_dim}, attention_dim, 1, rng));
  return bind(params, prefix);
}

AttentionParams AttentionParams::bind(const ParamSet& params, const std::string& prefix) {
  return {params.at(prefix + ".w"), params.at(prefix + ".v")};
}

AttentionResult attention_block(const Var& sequence, const AttentionParams& p) {
  if (sequence.value().rank() != 2) {
    throw ShapeError("attention_block: sequence must be [T,d], got " + shape_string(sequence.shape()));
  }
  if (p.w.shape()[1] != sequence.shape()[1]) {
    throw ShapeError("attention_block: feature width " + std::to_string(sequence.shape()[1]) +
                     " but attention expects " + std::to_string(p.w.shape()[1]));
  }
  // [T,d]·[d,a] -> [T,a] -> scores [T]
  Var projected = tanh(matmul(sequence, transpose(p.w)));
  Var scores = matvec(projected, p.v);
  Var alpha = softmax(scores);
  Var out = matvec(transpose(sequence), alpha);
  return {out, alpha};
}

}  // namespace watchped::ad
