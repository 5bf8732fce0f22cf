#include "watchped/reference.hpp"

#include <cmath>
#include <unordered_map>

namespace watchped {

template <typename T>
struct ReferenceModel<T>::Impl {
  using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapC = Eigen::Map<const Mat>;

  enum Branch { kNv, kLocalCnn, kLocal, kGlobalCnn, kGlobal, kCnn1, kCnn2, kBranches };

  ModelConfig cfg;
  Mode mode;
  std::vector<std::string> names;
  std::vector<Shape> shapes;
  std::vector<Vec> values;
  std::vector<int> branch_of;  // -1: fusion head
  std::unordered_map<std::string, std::size_t> index;

  Mat pose, bbox, speed, direction_t, sensor_t;
  std::vector<Mat> local_frames, global_frames;  // [3, H*W]
  Index side = 0;

  Vec out[kBranches];
  bool dirty[kBranches] = {true, true, true, true, true, true, true};
  std::uint64_t hash[kBranches] = {};
  std::uint64_t h = 0;  // running fingerprint of the branch being evaluated

  void mix(std::uint64_t v) { h = (h ^ v) * 1099511628211ULL; }

  MapC mat(const std::string& name) const {
    const std::size_t k = index.at(name);
    const Shape& s = shapes[k];
    const Index rows = s[0];
    return MapC(values[k].data(), rows, values[k].size() / rows);
  }
  const Vec& vec(const std::string& name) const { return values[index.at(name)]; }

  static T sigmoid(T x) {
    if (x >= 0) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
  }

  Mat gru(const Mat& seq, const std::string& pre) const {
    const auto wz = mat(pre + ".w_z"), uz = mat(pre + ".u_z"), wr = mat(pre + ".w_r"), ur = mat(pre + ".u_r");
    const auto wn = mat(pre + ".w_n"), un = mat(pre + ".u_n");
    const Vec &bz = vec(pre + ".b_z"), &br = vec(pre + ".b_r"), &bn = vec(pre + ".b_n");
    const Index hid = wz.rows();
    Mat out(seq.rows(), hid);
    Vec state = Vec::Zero(hid);
    for (Index t = 0; t < seq.rows(); ++t) {
      const Vec x = seq.row(t).transpose();
      Vec z = wz * x + uz * state + bz;
      Vec r = wr * x + ur * state + br;
      for (Index i = 0; i < hid; ++i) {
        z[i] = sigmoid(z[i]);
        r[i] = sigmoid(r[i]);
      }
      Vec n = wn * x + un * r.cwiseProduct(state) + bn;
      for (Index i = 0; i < hid; ++i) n[i] = std::tanh(n[i]);
      state = (Vec::Ones(hid) - z).cwiseProduct(n) + z.cwiseProduct(state);
      out.row(t) = state.transpose();
    }
    return out;
  }

  Vec attention(const Mat& seq, const std::string& pre) const {
    const auto w = mat(pre + ".w");
    const Vec& v = vec(pre + ".v");
    Vec e(seq.rows());
    for (Index t = 0; t < seq.rows(); ++t) {
      Vec a = w * seq.row(t).transpose();
      for (Index i = 0; i < a.size(); ++i) a[i] = std::tanh(a[i]);
      e[t] = v.dot(a);
    }
    const T mx = e.maxCoeff();
    for (Index t = 0; t < e.size(); ++t) e[t] = std::exp(e[t] - mx);
    e /= e.sum();
    return seq.transpose() * e;
  }

  void relu(Mat& x) {
    for (Index i = 0; i < x.size(); ++i) {
      const bool on = x.data()[i] > 0;
      mix(on);
      if (!on) x.data()[i] = 0;
    }
  }

  // 3x3, stride 1, pad 1 over [C, s*s].
  Mat conv3x3(const Mat& x, Index s, const std::string& name) {
    const auto w = mat(name + ".w");  // [O, C*9]
    const Vec& b = vec(name + ".b");
    const Index c = x.rows();
    Mat out(w.rows(), s * s);
    for (Index o = 0; o < w.rows(); ++o) {
      T* dst = &out(o, 0);
      std::fill(dst, dst + s * s, b[o]);
      for (Index ch = 0; ch < c; ++ch) {
        const T* src = &x(ch, 0);
        for (Index ky = 0; ky < 3; ++ky)
          for (Index kx = 0; kx < 3; ++kx) {
            const T wv = w(o, (ch * 3 + ky) * 3 + kx);
            const Index x0 = std::max<Index>(0, 1 - kx), x1 = std::min(s, s + 1 - kx);
            for (Index y = std::max<Index>(0, 1 - ky); y < std::min(s, s + 1 - ky); ++y) {
              T* d = dst + y * s;
              const T* r = src + (y + ky - 1) * s + kx - 1;
              for (Index xx = x0; xx < x1; ++xx) d[xx] += wv * r[xx];
            }
          }
      }
    }
    relu(out);
    return out;
  }

  Mat max_pool2x2(const Mat& x, Index s) {
    const Index o = s / 2;
    Mat out(x.rows(), o * o);
    for (Index c = 0; c < x.rows(); ++c)
      for (Index y = 0; y < o; ++y)
        for (Index xx = 0; xx < o; ++xx) {
          Index best = 0;
          T v = x(c, (2 * y) * s + 2 * xx);
          for (Index k = 1; k < 4; ++k) {
            const T cand = x(c, (2 * y + k / 2) * s + 2 * xx + k % 2);
            if (cand > v) {
              v = cand;
              best = k;
            }
          }
          mix(static_cast<std::uint64_t>(best));
          out(c, y * o + xx) = v;
        }
    return out;
  }

  // Frame features stacked into one column-major vector of [m, d].
  Vec vision_features(const std::vector<Mat>& frames, const std::string& side_name) {
    const std::string pre = "vis." + side_name + ".";
    Mat feats(static_cast<Index>(frames.size()), cfg.vision_feature_dim());
    for (std::size_t f = 0; f < frames.size(); ++f) {
      Mat x = frames[f];
      Index s = side;
      for (std::size_t b = 0; b < cfg.vision_blocks.size(); ++b) {
        for (std::size_t l = 0; l < cfg.vision_blocks[b].size(); ++l) {
          x = conv3x3(x, s, pre + "cnn.b" + std::to_string(b) + ".c" + std::to_string(l));
        }
        x = max_pool2x2(x, s);
        s /= 2;
      }
      feats.row(static_cast<Index>(f)) = x.rowwise().mean().transpose();
    }
    return Eigen::Map<const Vec>(feats.data(), feats.size());
  }

  Vec vision_side(const Vec& features, const std::string& side_name) {
    const std::string pre = "vis." + side_name + ".";
    const Index m = static_cast<Index>(local_frames.size());
    const Mat feats = Eigen::Map<const Mat>(features.data(), m, features.size() / m);
    return attention(gru(feats, pre + "gru"), pre + "att");
  }

  Mat conv1d(const Mat& x, const std::string& name) {
    const std::size_t k = index.at(name + ".w");
    const Index o = shapes[k][0], c = shapes[k][1], kw = shapes[k][2];
    const auto w = mat(name + ".w");  // [O, C*kw]
    const Index len = x.cols() - kw + 1;
    Mat cols(c * kw, len);
    for (Index ch = 0; ch < c; ++ch)
      for (Index j = 0; j < kw; ++j) cols.row(ch * kw + j) = x.row(ch).segment(j, len);
    Mat out = w * cols;
    out.colwise() += vec(name + ".b");
    (void)o;
    relu(out);
    return out;
  }

  Mat max_pool1d2(const Mat& x) {
    const Index o = x.cols() / 2;
    Mat out(x.rows(), o);
    for (Index c = 0; c < x.rows(); ++c)
      for (Index t = 0; t < o; ++t) {
        const bool second = x(c, 2 * t + 1) > x(c, 2 * t);
        mix(second);
        out(c, t) = second ? x(c, 2 * t + 1) : x(c, 2 * t);
      }
    return out;
  }

  Vec cnn1() {
    Mat x = sensor_t;
    const std::size_t layers = cfg.cnn1_channels.size();
    for (std::size_t i = 0; i < layers; ++i) {
      x = conv1d(x, std::string(kCnn1Prefix) + "c" + std::to_string(i));
      if (i + 1 < layers) x = max_pool1d2(x);
    }
    Vec logits = mat(std::string(kCnn1Prefix) + "fc.w") * x.rowwise().mean() + vec(std::string(kCnn1Prefix) + "fc.b");
    const T mx = logits.maxCoeff();
    for (Index i = 0; i < logits.size(); ++i) logits[i] = std::exp(logits[i] - mx);
    return logits / logits.sum();
  }

  Vec cnn2(const Vec& activity) {
    Mat x(kActivityClasses + 4, direction_t.cols());
    for (Index r = 0; r < kActivityClasses; ++r) x.row(r).setConstant(activity[r]);
    x.bottomRows(4) = direction_t;
    for (std::size_t i = 0; i < cfg.cnn2_channels.size(); ++i) {
      x = conv1d(x, std::string(kCnn2Prefix) + "c" + std::to_string(i));
    }
    return x.rowwise().mean();
  }

  void refresh() {
    auto run = [&](Branch b, auto&& fn) {
      if (!dirty[b]) return;
      h = 1469598103934665603ULL;
      out[b] = fn();
      hash[b] = h;
      dirty[b] = false;
    };
    if (mode != Mode::kSensorOnly) {
      run(kNv, [&] {
        Mat h1 = gru(pose, "nv.gru1");
        Mat x2(h1.rows(), h1.cols() + 4);
        x2 << h1, bbox;
        Mat h2 = gru(x2, "nv.gru2");
        Mat x3(h2.rows(), h2.cols() + 1);
        x3 << h2, speed;
        return attention(gru(x3, "nv.gru3"), "nv.att");
      });
      if (dirty[kLocalCnn]) dirty[kLocal] = true;
      if (dirty[kGlobalCnn]) dirty[kGlobal] = true;
      run(kLocalCnn, [&] { return vision_features(local_frames, "local"); });
      run(kGlobalCnn, [&] { return vision_features(global_frames, "global"); });
      run(kLocal, [&] { return vision_side(out[kLocalCnn], "local"); });
      run(kGlobal, [&] { return vision_side(out[kGlobalCnn], "global"); });
    }
    if (mode != Mode::kVisionOnly) {
      if (dirty[kCnn1]) dirty[kCnn2] = true;
      run(kCnn1, [&] { return cnn1(); });
      run(kCnn2, [&] { return cnn2(out[kCnn1]); });
    }
  }

  T probability() {
    refresh();
    const Index d = cfg.fused_dim();
    Vec fused = Vec::Zero(d);
    if (mode != Mode::kSensorOnly) {
      Mat seq = Mat::Zero(2, d);
      seq.row(0).head(cfg.vision_dim()) << out[kLocal].transpose(), out[kGlobal].transpose();
      seq.row(1).head(cfg.nv_dim()) = out[kNv].transpose();
      fused = attention(seq, "fusion.att");
    }
    Vec vs = Vec::Zero(cfg.sensor_dim());
    if (mode != Mode::kVisionOnly) vs = out[kCnn2];
    Vec x(d + vs.size());
    x << fused, vs;
    return sigmoid(mat("fusion.fc.w").row(0).dot(x.transpose()) + vec("fusion.fc.b")[0]);
  }
};

template <typename T>
ReferenceModel<T>::ReferenceModel(const ModelParams& model, const ModelInput& in, Mode mode)
    : impl_(std::make_unique<Impl>()) {
  Impl& s = *impl_;
  s.cfg = model.config;
  s.mode = mode;
  for (const auto& e : model.params.entries()) {
    s.index[e.name] = s.names.size();
    s.names.push_back(e.name);
    s.shapes.push_back(e.var.value().shape());
    s.values.push_back(e.var.value().data().template cast<T>());
    int b = -1;
    if (e.name.rfind("nv.", 0) == 0) b = Impl::kNv;
    if (e.name.rfind("vis.local.", 0) == 0) b = Impl::kLocal;
    if (e.name.rfind("vis.global.", 0) == 0) b = Impl::kGlobal;
    if (e.name.rfind(kVisionCnnPrefixes[0], 0) == 0) b = Impl::kLocalCnn;
    if (e.name.rfind(kVisionCnnPrefixes[1], 0) == 0) b = Impl::kGlobalCnn;
    if (e.name.rfind(kCnn1Prefix, 0) == 0) b = Impl::kCnn1;
    if (e.name.rfind(kCnn2Prefix, 0) == 0) b = Impl::kCnn2;
    s.branch_of.push_back(b);
  }
  auto cast = [](const Tensor& t, Index rows) { return typename Impl::Mat(t.as_matrix(rows).template cast<T>()); };
  const Index m = in.pose.dim(0);
  s.pose = cast(in.pose, m);
  for (Index t = 0; t < m; ++t) s.pose.row(t) *= static_cast<T>(in.pose_mask[t]);
  s.bbox = cast(in.bbox, m);
  s.speed = cast(in.speed, m);
  s.direction_t = cast(in.direction, in.direction.dim(0)).transpose();
  s.sensor_t = cast(in.sensor, in.sensor.dim(0)).transpose();
  if (mode != Mode::kSensorOnly) {
    s.side = in.local.dim(1);
    for (Index f = 0; f < m; ++f) {
      s.local_frames.push_back(cast(frame_chw(in.local, f), 3));
      s.global_frames.push_back(cast(frame_chw(in.global, f), 3));
    }
  }
}

template <typename T>
ReferenceModel<T>::~ReferenceModel() = default;

template <typename T>
std::size_t ReferenceModel<T>::parameter_count() const { return impl_->names.size(); }
template <typename T>
const std::string& ReferenceModel<T>::parameter_name(std::size_t k) const { return impl_->names.at(k); }
template <typename T>
Index ReferenceModel<T>::parameter_size(std::size_t k) const { return impl_->values.at(k).size(); }
template <typename T>
T ReferenceModel<T>::get(std::size_t k, Index i) const { return impl_->values.at(k)[i]; }

template <typename T>
void ReferenceModel<T>::set(std::size_t k, Index i, T value) {
  impl_->values.at(k)[i] = value;
  if (const int b = impl_->branch_of[k]; b >= 0) impl_->dirty[b] = true;
}

template <typename T>
T ReferenceModel<T>::probability() { return impl_->probability(); }

template <typename T>
T ReferenceModel<T>::loss(int label) {
  const T eps = static_cast<T>(ad::kLossEpsilon);
  const T p = std::clamp(probability(), eps, T(1) - eps);
  return label == 1 ? -std::log(p) : -std::log(T(1) - p);
}

template <typename T>
std::uint64_t ReferenceModel<T>::pattern() {
  impl_->refresh();
  std::uint64_t out = 0;
  for (std::uint64_t v : impl_->hash) out = (out ^ v) * 1099511628211ULL;
  return out;
}

template class ReferenceModel<double>;
template class ReferenceModel<long double>;

ad::GradCheckResult model_grad_check(ModelParams& model, const ModelInput& input, int label,
                                     const ModelGradCheckOptions& options) {
  std::vector<bool> saved;
  for (auto& e : model.params.entries()) {
    saved.push_back(e.var.requires_grad());
    e.var.set_requires_grad(true);
  }
  model.params.zero_grad();
  ad::Var loss = ad::bce_loss(forward_probability(input, model, options.mode, {}), label);
  loss.backward();
  std::vector<Tensor> analytic;
  for (auto& e : model.params.entries()) analytic.push_back(e.var.grad());
  for (std::size_t k = 0; k < saved.size(); ++k) model.params.entries()[k].var.set_requires_grad(saved[k]);

  using LD = long double;
  ReferenceModel<LD> ref(model, input, options.mode);
  const std::uint64_t base = ref.pattern();
  ad::GradCheckResult res;
  for (std::size_t k = 0; k < ref.parameter_count(); ++k) {
    for (Index i = 0; i < ref.parameter_size(k); ++i) {
      const LD orig = ref.get(k, i);
      LD eps = options.epsilon;
      LD fp = 0, fm = 0;
      for (int halving = 0;; ++halving) {
        ref.set(k, i, orig + eps);
        fp = ref.loss(label);
        const bool plus_ok = ref.pattern() == base;
        ref.set(k, i, orig - eps);
        fm = ref.loss(label);
        const bool minus_ok = ref.pattern() == base;
        ref.set(k, i, orig);
        if ((plus_ok && minus_ok) || halving == options.max_halvings) break;
        eps /= 2;
      }
      const double num = static_cast<double>((fp - fm) / (2 * eps));
      const double ana = analytic[k][i];
      const double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-8});
      ++res.coordinates;
      if (rel > res.max_relative_error || res.worst_index < 0) {
        res.max_relative_error = rel;
        res.worst_parameter = ref.parameter_name(k);
        res.worst_index = i;
        res.analytic = ana;
        res.numeric = num;
      }
    }
  }
  ref.pattern();  // leaves caches consistent with the restored parameters
  return res;
}

}  // namespace watchped
