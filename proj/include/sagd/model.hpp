#pragma once

// Multi-Geometry Projection network: a small configurable backbone (MLP,
// 3-block conv net, or a reduced residual net) with three heads on a shared
// penultimate feature — classification logits, a unit-norm hypersphere
// embedding, and a Poincare-ball embedding reached through feature clipping
// and the origin exponential map. Forward/backward are hand-written over
// Eigen and validated against finite differences.
//
// Batch convention: rows are samples. Image rows are flattened C x H x W,
// channel-major.

#include "sagd/common.hpp"
#include "sagd/geometry.hpp"
#include "sagd/losses.hpp"

#include "json.hpp"

#include <algorithm>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace sagd {

struct BackboneConfig {
  std::string architecture = "mlp";  // mlp | small_conv | resnet_like
  std::vector<int> input_shape;      // {dim} for vectors, {C, H, W} for images
  int embed_dim = 128;
  int num_classes = 10;
  std::vector<int> hidden_sizes = {64, 64};  // MLP widths; last = penultimate dim
  int conv_channels = 16;                    // base channel count for conv nets
  BallConfig ball;

  int input_dim() const {
    int d = 1;
    for (int s : input_shape) d *= s;
    return d;
  }

  void validate() const {
    if (architecture != "mlp" && architecture != "small_conv" &&
        architecture != "resnet_like")
      throw ConfigError("BackboneConfig: unknown architecture '" + architecture + "'");
    if (input_shape.empty()) throw ConfigError("BackboneConfig: input_shape is empty");
    for (int s : input_shape)
      if (s < 1) throw ConfigError("BackboneConfig: non-positive input_shape entry");
    if (architecture != "mlp" && input_shape.size() != 3)
      throw ConfigError("BackboneConfig: conv architectures need a {C,H,W} input_shape");
    if (embed_dim < 2) throw ConfigError("BackboneConfig: embed_dim must be >= 2");
    if (num_classes < 2) throw ConfigError("BackboneConfig: num_classes must be >= 2");
    if (hidden_sizes.empty()) throw ConfigError("BackboneConfig: hidden_sizes is empty");
    if (conv_channels < 1) throw ConfigError("BackboneConfig: conv_channels must be >= 1");
    ball.validate();
  }
};

struct DualHeadOutput {
  Mat logits;       // N x K
  Mat sphere;       // N x embed_dim, unit rows
  Mat ball;         // N x embed_dim, strictly inside the ball
  Mat penultimate;  // N x P, raw trunk features
};

// Flat view of one parameter tensor and its gradient buffer.
struct TensorRef {
  std::string name;
  double* value = nullptr;
  double* grad = nullptr;
  Eigen::Index size = 0;

  Eigen::Map<Vec> value_map() const { return {value, size}; }
  Eigen::Map<Vec> grad_map() const { return {grad, size}; }
};

namespace nn {

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Mat forward(const Mat& x) = 0;   // caches activations for backward
  virtual Mat backward(const Mat& gy) = 0; // accumulates parameter gradients
  virtual void collect(std::vector<TensorRef>& out, const std::string& prefix) {}
  virtual void zero_grad() {}
};

class Dense : public Layer {
 public:
  Dense(int in, int out, double init_scale, Rng& rng)
      : W_(out, in), b_(Vec::Zero(out)), gW_(Mat::Zero(out, in)), gb_(Vec::Zero(out)) {
    std::normal_distribution<double> gauss(0.0, init_scale / std::sqrt(double(in)));
    for (int r = 0; r < out; ++r)
      for (int c = 0; c < in; ++c) W_(r, c) = gauss(rng);
  }

  Mat forward(const Mat& x) override {
    x_ = x;
    return (x * W_.transpose()).rowwise() + b_.transpose();
  }

  Mat backward(const Mat& gy) override {
    gW_ += gy.transpose() * x_;
    gb_ += gy.colwise().sum().transpose();
    return gy * W_;
  }

  void collect(std::vector<TensorRef>& out, const std::string& prefix) override {
    out.push_back({prefix + ".W", W_.data(), gW_.data(), W_.size()});
    out.push_back({prefix + ".b", b_.data(), gb_.data(), b_.size()});
  }

  void zero_grad() override {
    gW_.setZero();
    gb_.setZero();
  }

  Mat W_;
  Vec b_;
  Mat gW_;
  Vec gb_;

 private:
  Mat x_;
};

class Relu : public Layer {
 public:
  Mat forward(const Mat& x) override {
    mask_ = (x.array() > 0.0).cast<double>();
    return x.cwiseProduct(mask_);
  }
  Mat backward(const Mat& gy) override { return gy.cwiseProduct(mask_); }

 private:
  Mat mask_;
};

// 3x3 same-padding convolution over channel-major flattened rows.
class Conv2d : public Layer {
 public:
  Conv2d(int c_in, int c_out, int h, int w, Rng& rng, int k = 3)
      : c_in_(c_in), c_out_(c_out), h_(h), w_(w), k_(k), pad_(k / 2),
        W_(c_out, c_in * k * k), b_(Vec::Zero(c_out)),
        gW_(Mat::Zero(c_out, c_in * k * k)), gb_(Vec::Zero(c_out)) {
    std::normal_distribution<double> gauss(
        0.0, std::sqrt(2.0 / double(c_in * k * k)));
    for (Eigen::Index i = 0; i < W_.size(); ++i) W_.data()[i] = gauss(rng);
  }

  int out_dim() const { return c_out_ * h_ * w_; }

  Mat forward(const Mat& x) override {
    const Eigen::Index n = x.rows();
    x_ = x;
    cols_.resize(static_cast<size_t>(n));
    Mat y(n, out_dim());
    for (Eigen::Index s = 0; s < n; ++s) {
      cols_[static_cast<size_t>(s)] = im2col(x.row(s));
      Mat out = W_ * cols_[static_cast<size_t>(s)];  // c_out x (h*w)
      out.colwise() += b_;
      // Channel-major flat row: index c*(h*w) + pos.
      Mat out_t = out.transpose();  // (h*w) x c_out, column-major
      y.row(s) = Eigen::Map<const Vec>(out_t.data(), out_t.size()).transpose();
    }
    return y;
  }

  Mat backward(const Mat& gy) override {
    const Eigen::Index n = gy.rows();
    Mat gx = Mat::Zero(n, c_in_ * h_ * w_);
    for (Eigen::Index s = 0; s < n; ++s) {
      Vec grow = gy.row(s).transpose();  // contiguous copy of the strided row
      Mat gmat = Eigen::Map<const Mat>(grow.data(), h_ * w_, c_out_).transpose();
      gW_ += gmat * cols_[static_cast<size_t>(s)].transpose();
      gb_ += gmat.rowwise().sum();
      Mat gcol = W_.transpose() * gmat;  // (c_in*k*k) x (h*w)
      col2im(gcol, gx.row(s));
    }
    return gx;
  }

  void collect(std::vector<TensorRef>& out, const std::string& prefix) override {
    out.push_back({prefix + ".W", W_.data(), gW_.data(), W_.size()});
    out.push_back({prefix + ".b", b_.data(), gb_.data(), b_.size()});
  }

  void zero_grad() override {
    gW_.setZero();
    gb_.setZero();
  }

  Mat W_;
  Vec b_;
  Mat gW_;
  Vec gb_;

 private:
  Mat im2col(const Eigen::Ref<const Eigen::RowVectorXd>& row) const {
    Mat col = Mat::Zero(c_in_ * k_ * k_, h_ * w_);
    for (int c = 0; c < c_in_; ++c)
      for (int dy = 0; dy < k_; ++dy)
        for (int dx = 0; dx < k_; ++dx) {
          const int patch_row = (c * k_ + dy) * k_ + dx;
          for (int y = 0; y < h_; ++y) {
            const int sy = y + dy - pad_;
            if (sy < 0 || sy >= h_) continue;
            for (int x = 0; x < w_; ++x) {
              const int sx = x + dx - pad_;
              if (sx < 0 || sx >= w_) continue;
              col(patch_row, y * w_ + x) = row(c * h_ * w_ + sy * w_ + sx);
            }
          }
        }
    return col;
  }

  void col2im(const Mat& gcol,
              Eigen::Ref<Eigen::RowVectorXd, 0, Eigen::InnerStride<>> grow) const {
    for (int c = 0; c < c_in_; ++c)
      for (int dy = 0; dy < k_; ++dy)
        for (int dx = 0; dx < k_; ++dx) {
          const int patch_row = (c * k_ + dy) * k_ + dx;
          for (int y = 0; y < h_; ++y) {
            const int sy = y + dy - pad_;
            if (sy < 0 || sy >= h_) continue;
            for (int x = 0; x < w_; ++x) {
              const int sx = x + dx - pad_;
              if (sx < 0 || sx >= w_) continue;
              grow(c * h_ * w_ + sy * w_ + sx) += gcol(patch_row, y * w_ + x);
            }
          }
        }
  }

  int c_in_, c_out_, h_, w_, k_, pad_;
  Mat x_;
  std::vector<Mat> cols_;
};

// 2x2 stride-2 average pool; odd trailing rows/columns are dropped.
class AvgPool2d : public Layer {
 public:
  AvgPool2d(int channels, int h, int w)
      : c_(channels), h_(h), w_(w), ho_(h / 2), wo_(w / 2) {}

  int out_h() const { return ho_; }
  int out_w() const { return wo_; }
  int out_dim() const { return c_ * ho_ * wo_; }

  Mat forward(const Mat& x) override {
    const Eigen::Index n = x.rows();
    Mat y = Mat::Zero(n, out_dim());
    for (Eigen::Index s = 0; s < n; ++s)
      for (int c = 0; c < c_; ++c)
        for (int y0 = 0; y0 < ho_; ++y0)
          for (int x0 = 0; x0 < wo_; ++x0) {
            double acc = 0.0;
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx)
                acc += x(s, c * h_ * w_ + (2 * y0 + dy) * w_ + (2 * x0 + dx));
            y(s, c * ho_ * wo_ + y0 * wo_ + x0) = acc / 4.0;
          }
    return y;
  }

  Mat backward(const Mat& gy) override {
    const Eigen::Index n = gy.rows();
    Mat gx = Mat::Zero(n, c_ * h_ * w_);
    for (Eigen::Index s = 0; s < n; ++s)
      for (int c = 0; c < c_; ++c)
        for (int y0 = 0; y0 < ho_; ++y0)
          for (int x0 = 0; x0 < wo_; ++x0) {
            const double g = gy(s, c * ho_ * wo_ + y0 * wo_ + x0) / 4.0;
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx)
                gx(s, c * h_ * w_ + (2 * y0 + dy) * w_ + (2 * x0 + dx)) += g;
          }
    return gx;
  }

 private:
  int c_, h_, w_, ho_, wo_;
};

class GlobalAvgPool : public Layer {
 public:
  GlobalAvgPool(int channels, int h, int w) : c_(channels), hw_(h * w) {}

  Mat forward(const Mat& x) override {
    const Eigen::Index n = x.rows();
    Mat y(n, c_);
    for (Eigen::Index s = 0; s < n; ++s)
      for (int c = 0; c < c_; ++c)
        y(s, c) = x.row(s).segment(c * hw_, hw_).mean();
    return y;
  }

  Mat backward(const Mat& gy) override {
    const Eigen::Index n = gy.rows();
    Mat gx(n, c_ * hw_);
    for (Eigen::Index s = 0; s < n; ++s)
      for (int c = 0; c < c_; ++c)
        gx.row(s).segment(c * hw_, hw_).setConstant(gy(s, c) / double(hw_));
    return gx;
  }

 private:
  int c_, hw_;
};

// y = relu(x + conv2(relu(conv1(x)))), channel count preserved.
class ResidualBlock : public Layer {
 public:
  ResidualBlock(int channels, int h, int w, Rng& rng)
      : conv1_(channels, channels, h, w, rng), conv2_(channels, channels, h, w, rng) {}

  Mat forward(const Mat& x) override {
    Mat t = relu1_.forward(conv1_.forward(x));
    Mat sum = x + conv2_.forward(t);
    return relu_out_.forward(sum);
  }

  Mat backward(const Mat& gy) override {
    Mat gsum = relu_out_.backward(gy);
    Mat gt = conv2_.backward(gsum);
    Mat gx = conv1_.backward(relu1_.backward(gt));
    return gx + gsum;
  }

  void collect(std::vector<TensorRef>& out, const std::string& prefix) override {
    conv1_.collect(out, prefix + ".conv1");
    conv2_.collect(out, prefix + ".conv2");
  }

  void zero_grad() override {
    conv1_.zero_grad();
    conv2_.zero_grad();
  }

 private:
  Conv2d conv1_, conv2_;
  Relu relu1_, relu_out_;
};

}  // namespace nn

namespace nn {

// Row normalization with a deterministic fallback for (rare) exactly-dead
// activations: a zero row maps to e1 so the unit-norm output invariant holds
// for every input; the gradient there is zero.
inline Vec normalize_guarded(const Vec& x) {
  const double n = x.norm();
  if (n <= 1e-12) {
    Vec e = Vec::Zero(x.size());
    e(0) = 1.0;
    return e;
  }
  return x / n;
}

inline Vec normalize_guarded_backward(const Vec& x, const Vec& grad_y) {
  if (x.norm() <= 1e-12) return Vec::Zero(x.size());
  return sphere_project_backward(x, grad_y);
}

}  // namespace nn

class MgpNetwork {
 public:
  MgpNetwork(BackboneConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build(rng);
  }

  const BackboneConfig& config() const { return cfg_; }
  int penultimate_dim() const { return penultimate_dim_; }

  // Full three-head pass; intermediate activations are cached for backward.
  DualHeadOutput forward(const Mat& x) {
    if (x.cols() != cfg_.input_dim())
      throw ContractViolation("MgpNetwork::forward: input width " +
                              std::to_string(x.cols()) + " != configured " +
                              std::to_string(cfg_.input_dim()));
    Mat h = x;
    for (auto& layer : trunk_) h = layer->forward(h);
    penult_ = h;

    DualHeadOutput out;
    out.penultimate = h;
    out.logits = logits_head_->forward(h);

    sphere_pre_ = sphere_head_->forward(h);
    out.sphere = Mat(sphere_pre_.rows(), sphere_pre_.cols());
    for (Eigen::Index i = 0; i < sphere_pre_.rows(); ++i)
      out.sphere.row(i) = nn::normalize_guarded(sphere_pre_.row(i).transpose()).transpose();

    ball_pre_ = ball_head_->forward(h);
    ball_clipped_ = Mat(ball_pre_.rows(), ball_pre_.cols());
    out.ball = Mat(ball_pre_.rows(), ball_pre_.cols());
    for (Eigen::Index i = 0; i < ball_pre_.rows(); ++i) {
      Vec clipped = feature_clip(ball_pre_.row(i).transpose(), cfg_.ball.clip_radius);
      ball_clipped_.row(i) = clipped.transpose();
      out.ball.row(i) = exp_map_origin_raw(clipped, cfg_.ball).transpose();
    }
    return out;
  }

  // Adjoints of the three heads (any may be empty => zero) plus an optional
  // direct adjoint on the penultimate feature. Accumulates parameter
  // gradients and returns dLoss/dInput.
  Mat backward(const Mat& grad_logits, const Mat& grad_sphere, const Mat& grad_ball,
               const Mat* grad_penultimate = nullptr) {
    Mat g_pen = Mat::Zero(penult_.rows(), penult_.cols());
    if (grad_logits.size() > 0) g_pen += logits_head_->backward(grad_logits);
    if (grad_sphere.size() > 0) {
      Mat g_spre(sphere_pre_.rows(), sphere_pre_.cols());
      for (Eigen::Index i = 0; i < sphere_pre_.rows(); ++i)
        g_spre.row(i) = nn::normalize_guarded_backward(sphere_pre_.row(i).transpose(),
                                                       grad_sphere.row(i).transpose())
                            .transpose();
      g_pen += sphere_head_->backward(g_spre);
    }
    if (grad_ball.size() > 0) {
      Mat g_bpre(ball_pre_.rows(), ball_pre_.cols());
      for (Eigen::Index i = 0; i < ball_pre_.rows(); ++i) {
        Vec g_clip = exp_map_origin_backward(ball_clipped_.row(i).transpose(),
                                             cfg_.ball, grad_ball.row(i).transpose());
        g_bpre.row(i) = feature_clip_backward(ball_pre_.row(i).transpose(),
                                              cfg_.ball.clip_radius, g_clip)
                            .transpose();
      }
      g_pen += ball_head_->backward(g_bpre);
    }
    if (grad_penultimate) g_pen += *grad_penultimate;

    Mat g = g_pen;
    for (auto it = trunk_.rbegin(); it != trunk_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }

  // Input gradient through the logits head only (attack objectives).
  Mat backward_logits_only(const Mat& grad_logits) {
    Mat g = logits_head_->backward(grad_logits);
    for (auto it = trunk_.rbegin(); it != trunk_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }

  // L2-normalized penultimate features; the representation OOD scoring uses.
  Mat embed_for_scoring(const Mat& x) {
    DualHeadOutput out = forward(x);
    return normalize_rows(out.penultimate);
  }

  // Input gradient of the scoring embedding given its adjoint; requires a
  // preceding forward() on the same batch.
  Mat backward_scoring(const Mat& grad_embedding) {
    Mat g_pen(penult_.rows(), penult_.cols());
    for (Eigen::Index i = 0; i < penult_.rows(); ++i)
      g_pen.row(i) = nn::normalize_guarded_backward(penult_.row(i).transpose(),
                                                    grad_embedding.row(i).transpose())
                         .transpose();
    Mat g = g_pen;
    for (auto it = trunk_.rbegin(); it != trunk_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }

  static Mat normalize_rows(const Mat& m) {
    Mat out(m.rows(), m.cols());
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      out.row(i) = nn::normalize_guarded(m.row(i).transpose()).transpose();
    return out;
  }

  std::vector<TensorRef> parameters() {
    std::vector<TensorRef> refs;
    for (size_t i = 0; i < trunk_.size(); ++i)
      trunk_[i]->collect(refs, "trunk." + std::to_string(i));
    logits_head_->collect(refs, "head.logits");
    sphere_head_->collect(refs, "head.sphere");
    ball_head_->collect(refs, "head.ball");
    return refs;
  }

  void zero_grad() {
    for (auto& layer : trunk_) layer->zero_grad();
    logits_head_->zero_grad();
    sphere_head_->zero_grad();
    ball_head_->zero_grad();
  }

 private:
  void build(Rng& rng) {
    if (cfg_.architecture == "mlp") {
      int in = cfg_.input_dim();
      for (int width : cfg_.hidden_sizes) {
        trunk_.push_back(std::make_unique<nn::Dense>(in, width, std::sqrt(2.0), rng));
        trunk_.push_back(std::make_unique<nn::Relu>());
        in = width;
      }
      penultimate_dim_ = in;
    } else {
      const int c_in = cfg_.input_shape[0];
      int h = cfg_.input_shape[1];
      int w = cfg_.input_shape[2];
      const int f = cfg_.conv_channels;
      if (cfg_.architecture == "small_conv") {
        int c = c_in;
        int co = f;
        for (int block = 0; block < 3; ++block) {
          trunk_.push_back(std::make_unique<nn::Conv2d>(c, co, h, w, rng));
          trunk_.push_back(std::make_unique<nn::Relu>());
          auto pool = std::make_unique<nn::AvgPool2d>(co, h, w);
          h = pool->out_h();
          w = pool->out_w();
          if (h < 1 || w < 1)
            throw ConfigError("BackboneConfig: input too small for small_conv pooling");
          trunk_.push_back(std::move(pool));
          c = co;
          co *= 2;
        }
        trunk_.push_back(std::make_unique<nn::GlobalAvgPool>(c, h, w));
        trunk_.push_back(
            std::make_unique<nn::Dense>(c, cfg_.hidden_sizes.back(), std::sqrt(2.0), rng));
        trunk_.push_back(std::make_unique<nn::Relu>());
      } else {  // resnet_like
        trunk_.push_back(std::make_unique<nn::Conv2d>(c_in, f, h, w, rng));
        trunk_.push_back(std::make_unique<nn::Relu>());
        trunk_.push_back(std::make_unique<nn::ResidualBlock>(f, h, w, rng));
        auto pool = std::make_unique<nn::AvgPool2d>(f, h, w);
        h = pool->out_h();
        w = pool->out_w();
        if (h < 1 || w < 1)
          throw ConfigError("BackboneConfig: input too small for resnet_like pooling");
        trunk_.push_back(std::move(pool));
        trunk_.push_back(std::make_unique<nn::Conv2d>(f, 2 * f, h, w, rng));
        trunk_.push_back(std::make_unique<nn::Relu>());
        trunk_.push_back(std::make_unique<nn::ResidualBlock>(2 * f, h, w, rng));
        trunk_.push_back(std::make_unique<nn::GlobalAvgPool>(2 * f, h, w));
        trunk_.push_back(std::make_unique<nn::Dense>(2 * f, cfg_.hidden_sizes.back(),
                                                     std::sqrt(2.0), rng));
        trunk_.push_back(std::make_unique<nn::Relu>());
      }
      penultimate_dim_ = cfg_.hidden_sizes.back();
    }
    logits_head_ = std::make_unique<nn::Dense>(penultimate_dim_, cfg_.num_classes, 1.0, rng);
    sphere_head_ = std::make_unique<nn::Dense>(penultimate_dim_, cfg_.embed_dim, 1.0, rng);
    ball_head_ = std::make_unique<nn::Dense>(penultimate_dim_, cfg_.embed_dim, 1.0, rng);
  }

  BackboneConfig cfg_;
  std::vector<std::unique_ptr<nn::Layer>> trunk_;
  std::unique_ptr<nn::Dense> logits_head_;
  std::unique_ptr<nn::Dense> sphere_head_;
  std::unique_ptr<nn::Dense> ball_head_;
  int penultimate_dim_ = 0;

  // Caches from the last forward().
  Mat penult_, sphere_pre_, ball_pre_, ball_clipped_;
};

// ---------------------------------------------------------------------------
// Checkpoint I/O: single JSON archive with a mandatory version field,
// parameter arrays keyed by stable names, the backbone config, the prototype
// bank, and the training seed. Doubles survive the round trip bit-exactly.
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

inline void to_json(nlohmann::json& j, const BallConfig& b) {
  j = {{"curvature", b.curvature},
       {"clip_radius", b.clip_radius},
       {"boundary_eps", b.boundary_eps}};
}

inline void from_json(const nlohmann::json& j, BallConfig& b) {
  j.at("curvature").get_to(b.curvature);
  j.at("clip_radius").get_to(b.clip_radius);
  j.at("boundary_eps").get_to(b.boundary_eps);
}

inline void to_json(nlohmann::json& j, const BackboneConfig& c) {
  j = {{"architecture", c.architecture}, {"input_shape", c.input_shape},
       {"embed_dim", c.embed_dim},       {"num_classes", c.num_classes},
       {"hidden_sizes", c.hidden_sizes}, {"conv_channels", c.conv_channels},
       {"ball", c.ball}};
}

inline void from_json(const nlohmann::json& j, BackboneConfig& c) {
  j.at("architecture").get_to(c.architecture);
  j.at("input_shape").get_to(c.input_shape);
  j.at("embed_dim").get_to(c.embed_dim);
  j.at("num_classes").get_to(c.num_classes);
  j.at("hidden_sizes").get_to(c.hidden_sizes);
  j.at("conv_channels").get_to(c.conv_channels);
  j.at("ball").get_to(c.ball);
}

struct Checkpoint {
  BackboneConfig backbone;
  PrototypeBank bank;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::vector<double>>> params;
};

inline Checkpoint make_checkpoint(MgpNetwork& net, const PrototypeBank& bank,
                                  std::uint64_t seed) {
  Checkpoint ck;
  ck.backbone = net.config();
  ck.bank = bank;
  ck.seed = seed;
  for (const TensorRef& ref : net.parameters()) {
    std::vector<double> v(ref.value, ref.value + ref.size);
    ck.params.emplace_back(ref.name, std::move(v));
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  nlohmann::json j;
  j["version"] = kCheckpointVersion;
  j["seed"] = ck.seed;
  j["backbone"] = ck.backbone;
  nlohmann::json bank;
  bank["temperature"] = ck.bank.temperature;
  bank["ema_factor"] = ck.bank.ema_factor;
  std::vector<std::vector<double>> rows;
  for (Eigen::Index k = 0; k < ck.bank.prototypes.rows(); ++k) {
    rows.emplace_back(ck.bank.prototypes.row(k).begin(), ck.bank.prototypes.row(k).end());
  }
  bank["prototypes"] = rows;
  j["prototype_bank"] = bank;
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [name, values] : ck.params) params[name] = values;
  j["params"] = params;
  write_file_atomic(path, j.dump(2) + "\n");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint parse failed: " + path.string() + ": " + e.what());
  }
  if (!j.contains("version"))
    throw IoError("checkpoint missing version field: " + path.string());
  if (j.at("version").get<int>() != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " +
                  std::to_string(j.at("version").get<int>()) + " in " + path.string());
  Checkpoint ck;
  j.at("backbone").get_to(ck.backbone);
  j.at("seed").get_to(ck.seed);
  const auto& bank = j.at("prototype_bank");
  bank.at("temperature").get_to(ck.bank.temperature);
  bank.at("ema_factor").get_to(ck.bank.ema_factor);
  auto rows = bank.at("prototypes").get<std::vector<std::vector<double>>>();
  if (rows.empty()) throw IoError("checkpoint has an empty prototype bank");
  ck.bank.prototypes = Mat(rows.size(), rows[0].size());
  for (size_t k = 0; k < rows.size(); ++k)
    ck.bank.prototypes.row(static_cast<Eigen::Index>(k)) =
        Eigen::Map<const Vec>(rows[k].data(), static_cast<Eigen::Index>(rows[k].size()));
  for (const auto& [name, values] : j.at("params").items())
    ck.params.emplace_back(name, values.get<std::vector<double>>());
  return ck;
}

// Writes checkpoint parameter values into an existing (config-compatible)
// network.
inline void restore_parameters(MgpNetwork& net, const Checkpoint& ck) {
  auto refs = net.parameters();
  if (refs.size() != ck.params.size())
    throw IoError("checkpoint parameter count mismatch");
  for (const TensorRef& ref : refs) {
    const auto it =
        std::find_if(ck.params.begin(), ck.params.end(),
                     [&](const auto& kv) { return kv.first == ref.name; });
    if (it == ck.params.end())
      throw IoError("checkpoint is missing parameter '" + ref.name + "'");
    if (static_cast<Eigen::Index>(it->second.size()) != ref.size)
      throw IoError("checkpoint parameter size mismatch at '" + ref.name + "'");
    std::copy(it->second.begin(), it->second.end(), ref.value);
  }
}

}  // namespace sagd
