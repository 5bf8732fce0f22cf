#pragma once

// Straight-line re-evaluation of the model from raw parameter values. Loops
// only; nothing here calls the library's ops or layers.

#include "test_util.hpp"
#include "watchped/model.hpp"

namespace oracle {

using watchped::Index;
using watchped::Tensor;
using Mat = std::vector<std::vector<double>>;  // [rows][cols]
using Vec = std::vector<double>;

inline const Tensor& val(const watchped::ad::ParamSet& ps, const std::string& name) { return ps.at(name).value(); }

inline Mat to_mat(const Tensor& t) {
  Mat m(static_cast<std::size_t>(t.dim(0)), Vec(static_cast<std::size_t>(t.dim(1))));
  for (Index i = 0; i < t.dim(0); ++i)
    for (Index j = 0; j < t.dim(1); ++j) m[i][j] = t.at({i, j});
  return m;
}

inline Vec to_vec(const Tensor& t) { return Vec(t.data().data(), t.data().data() + t.size()); }

inline Vec affine(const Tensor& w, const Vec& x) {
  Vec out(static_cast<std::size_t>(w.dim(0)), 0.0);
  for (Index i = 0; i < w.dim(0); ++i)
    for (Index j = 0; j < w.dim(1); ++j) out[i] += w.at({i, j}) * x[j];
  return out;
}

inline Mat gru(const Mat& seq, const watchped::ad::ParamSet& ps, const std::string& pre) {
  const Tensor& wz = val(ps, pre + ".w_z");
  const auto h = static_cast<std::size_t>(wz.dim(0));
  Vec state(h, 0.0);
  Mat out;
  for (const Vec& x : seq) {
    const Vec az = affine(val(ps, pre + ".w_z"), x), uz = affine(val(ps, pre + ".u_z"), state);
    const Vec ar = affine(val(ps, pre + ".w_r"), x), ur = affine(val(ps, pre + ".u_r"), state);
    Vec z(h), r(h), rh(h), next(h);
    for (std::size_t i = 0; i < h; ++i) {
      z[i] = testutil::logistic(az[i] + uz[i] + val(ps, pre + ".b_z")[i]);
      r[i] = testutil::logistic(ar[i] + ur[i] + val(ps, pre + ".b_r")[i]);
      rh[i] = r[i] * state[i];
    }
    const Vec an = affine(val(ps, pre + ".w_n"), x), un = affine(val(ps, pre + ".u_n"), rh);
    for (std::size_t i = 0; i < h; ++i) {
      const double n = std::tanh(an[i] + un[i] + val(ps, pre + ".b_n")[i]);
      next[i] = (1 - z[i]) * n + z[i] * state[i];
    }
    state = next;
    out.push_back(state);
  }
  return out;
}

inline Vec attention(const Mat& seq, const watchped::ad::ParamSet& ps, const std::string& pre) {
  const Tensor& w = val(ps, pre + ".w");
  const Tensor& v = val(ps, pre + ".v");
  Vec e;
  for (const Vec& row : seq) {
    const Vec a = affine(w, row);
    double s = 0;
    for (std::size_t k = 0; k < a.size(); ++k) s += v[static_cast<Index>(k)] * std::tanh(a[k]);
    e.push_back(s);
  }
  const double mx = *std::max_element(e.begin(), e.end());
  double z = 0;
  for (double& x : e) z += (x = std::exp(x - mx));
  Vec out(seq[0].size(), 0.0);
  for (std::size_t t = 0; t < seq.size(); ++t)
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += e[t] / z * seq[t][j];
  return out;
}

inline Mat concat_cols(const Mat& a, const Mat& b) {
  Mat out = a;
  for (std::size_t t = 0; t < a.size(); ++t) out[t].insert(out[t].end(), b[t].begin(), b[t].end());
  return out;
}

inline Vec non_vision(const watchped::ModelInput& in, const watchped::ad::ParamSet& ps) {
  Mat pose = to_mat(in.pose);
  for (std::size_t t = 0; t < pose.size(); ++t)
    for (double& x : pose[t]) x *= in.pose_mask[static_cast<Index>(t)];
  Mat h1 = gru(pose, ps, "nv.gru1");
  Mat h2 = gru(concat_cols(h1, to_mat(in.bbox)), ps, "nv.gru2");
  Mat h3 = gru(concat_cols(h2, to_mat(in.speed)), ps, "nv.gru3");
  return attention(h3, ps, "nv.att");
}

inline Vec cnn_frame(const Tensor& rasters, Index frame, const watchped::ad::ParamSet& ps, const std::string& pre,
                     const watchped::ModelConfig& cfg) {
  const Index s = rasters.dim(1);
  Tensor x({3, s, s});
  for (Index c = 0; c < 3; ++c)
    for (Index y = 0; y < s; ++y)
      for (Index xx = 0; xx < s; ++xx) x.at({c, y, xx}) = rasters.at({frame, y, xx, c});
  for (std::size_t b = 0; b < cfg.vision_blocks.size(); ++b) {
    for (std::size_t l = 0; l < cfg.vision_blocks[b].size(); ++l) {
      const std::string n = pre + "b" + std::to_string(b) + ".c" + std::to_string(l);
      Tensor y = testutil::conv2d_oracle(x, val(ps, n + ".w"), 1, 1);
      const Tensor& bias = val(ps, n + ".b");
      const Index plane = y.dim(1) * y.dim(2);
      for (Index i = 0; i < y.size(); ++i) y[i] = std::max(0.0, y[i] + bias[i / plane]);
      x = y;
    }
    x = testutil::pool_oracle(x, true, 2, 2);
  }
  Tensor avg = testutil::pool_oracle(x, false, x.dim(1), x.dim(2));
  return to_vec(avg);
}

inline Vec vision(const watchped::ModelInput& in, const watchped::ad::ParamSet& ps, const watchped::ModelConfig& cfg) {
  Vec out;
  for (const char* side : {"local", "global"}) {
    const Tensor& r = std::string(side) == "local" ? in.local : in.global;
    Mat feats;
    for (Index f = 0; f < r.dim(0); ++f) feats.push_back(cnn_frame(r, f, ps, std::string("vis.") + side + ".cnn.", cfg));
    Vec v = attention(gru(feats, ps, std::string("vis.") + side + ".gru"), ps, std::string("vis.") + side + ".att");
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

// [C,L] valid 1-D convolution with bias.
inline Mat conv1d(const Mat& x, const Tensor& k, const Tensor& b) {
  const Index o = k.dim(0), c = k.dim(1), kw = k.dim(2);
  const auto len = static_cast<Index>(x[0].size()) - kw + 1;
  Mat out(static_cast<std::size_t>(o), Vec(static_cast<std::size_t>(len)));
  for (Index oc = 0; oc < o; ++oc)
    for (Index t = 0; t < len; ++t) {
      double acc = b[oc];
      for (Index ic = 0; ic < c; ++ic)
        for (Index j = 0; j < kw; ++j) acc += k.at({oc, ic, j}) * x[ic][t + j];
      out[oc][t] = acc;
    }
  return out;
}

inline Vec channel_means(const Mat& x) {
  Vec out;
  for (const Vec& row : x) {
    double s = 0;
    for (double v : row) s += v;
    out.push_back(s / static_cast<double>(row.size()));
  }
  return out;
}

inline Vec cnn1(const Tensor& sensor, const watchped::ad::ParamSet& ps, std::size_t layers) {
  Mat x(6, Vec(static_cast<std::size_t>(sensor.dim(0))));
  for (Index t = 0; t < sensor.dim(0); ++t)
    for (Index c = 0; c < 6; ++c) x[c][t] = sensor.at({t, c});
  for (std::size_t i = 0; i < layers; ++i) {
    const std::string n = "sensor.cnn1.c" + std::to_string(i);
    x = conv1d(x, val(ps, n + ".w"), val(ps, n + ".b"));
    for (Vec& row : x)
      for (double& v : row) v = std::max(0.0, v);
    if (i + 1 < layers) {
      for (Vec& row : x) {
        Vec pooled;
        for (std::size_t t = 0; t + 1 < row.size(); t += 2) pooled.push_back(std::max(row[t], row[t + 1]));
        row = pooled;
      }
    }
  }
  Vec logits = affine(val(ps, "sensor.cnn1.fc.w"), channel_means(x));
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += val(ps, "sensor.cnn1.fc.b")[static_cast<Index>(i)];
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0;
  for (double& v : logits) z += (v = std::exp(v - mx));
  for (double& v : logits) v /= z;
  return logits;
}

inline Vec sensor(const Vec& activity, const Tensor& direction, const watchped::ad::ParamSet& ps, std::size_t layers) {
  const auto t_len = static_cast<std::size_t>(direction.dim(0));
  Mat x(7, Vec(t_len));
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t c = 0; c < 3; ++c) x[c][t] = activity[c];
    for (Index c = 0; c < 4; ++c) x[3 + c][t] = direction.at({static_cast<Index>(t), c});
  }
  for (std::size_t i = 0; i < layers; ++i) {
    const std::string n = "sensor.cnn2.c" + std::to_string(i);
    x = conv1d(x, val(ps, n + ".w"), val(ps, n + ".b"));
    for (Vec& row : x)
      for (double& v : row) v = std::max(0.0, v);
  }
  return channel_means(x);
}

inline Vec fuse(Vec v_v, Vec v_nv, const watchped::ad::ParamSet& ps) {
  const std::size_t d = std::max(v_v.size(), v_nv.size());
  v_v.resize(d, 0.0);
  v_nv.resize(d, 0.0);
  return attention({v_v, v_nv}, ps, "fusion.att");
}

inline double final_prob(const Vec& fused, const Vec& vs, const watchped::ad::ParamSet& ps) {
  Vec x = fused;
  x.insert(x.end(), vs.begin(), vs.end());
  return testutil::logistic(affine(val(ps, "fusion.fc.w"), x)[0] + val(ps, "fusion.fc.b")[0]);
}

inline double full_model(const watchped::ModelInput& in, const watchped::ModelParams& p) {
  const auto& ps = p.params;
  const Vec fused = fuse(vision(in, ps, p.config), non_vision(in, ps), ps);
  const Vec vs = sensor(cnn1(in.sensor, ps, p.config.cnn1_channels.size()), in.direction, ps, p.config.cnn2_channels.size());
  return final_prob(fused, vs, ps);
}

}  // namespace oracle
