#include "rock/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "rock/attack.hpp"
#include "rock/judgment.hpp"
#include "rock/rten.hpp"
#include "rock/util.hpp"

namespace rock {

using nlohmann::json;

namespace {

struct Dims {
  int H, W;
  std::size_t plane() const { return static_cast<std::size_t>(H) * W; }
};

// out(Co,H,W) = b + conv(in(Ci,H,W), w(Co,Ci,3,3)), zero padding.
void conv3x3_forward(const double* in, int Ci, Dims d, const double* w, const double* b, int Co, double* out) {
  const std::size_t P = d.plane();
  for (int o = 0; o < Co; ++o) {
    double* op = out + o * P;
    std::fill(op, op + P, b[o]);
    for (int i = 0; i < Ci; ++i) {
      const double* ip = in + i * P;
      for (int ky = 0; ky < 3; ++ky) {
        const int dy = ky - 1;
        const int y0 = std::max(0, -dy), y1 = std::min(d.H, d.H - dy);
        for (int kx = 0; kx < 3; ++kx) {
          const int dx = kx - 1;
          const int x0 = std::max(0, -dx), x1 = std::min(d.W, d.W - dx);
          const double wv = w[((o * Ci + i) * 3 + ky) * 3 + kx];
          for (int y = y0; y < y1; ++y) {
            double* orow = op + y * d.W;
            const double* irow = ip + (y + dy) * d.W + dx;
            for (int x = x0; x < x1; ++x) orow[x] += wv * irow[x];
          }
        }
      }
    }
  }
}

// Accumulates dw, db and (optionally) din from dout.
void conv3x3_backward(const double* in, int Ci, Dims d, const double* w, int Co, const double* dout, double* dw,
                      double* db, double* din) {
  const std::size_t P = d.plane();
  for (int o = 0; o < Co; ++o) {
    const double* gp = dout + o * P;
    double s = 0.0;
    for (std::size_t t = 0; t < P; ++t) s += gp[t];
    db[o] += s;
    for (int i = 0; i < Ci; ++i) {
      const double* ip = in + i * P;
      double* dp = din ? din + i * P : nullptr;
      for (int ky = 0; ky < 3; ++ky) {
        const int dy = ky - 1;
        const int y0 = std::max(0, -dy), y1 = std::min(d.H, d.H - dy);
        for (int kx = 0; kx < 3; ++kx) {
          const int dx = kx - 1;
          const int x0 = std::max(0, -dx), x1 = std::min(d.W, d.W - dx);
          const std::size_t widx = ((o * Ci + i) * 3 + ky) * 3 + kx;
          const double wv = w[widx];
          double acc = 0.0;
          for (int y = y0; y < y1; ++y) {
            const double* grow = gp + y * d.W;
            const double* irow = ip + (y + dy) * d.W + dx;
            for (int x = x0; x < x1; ++x) acc += grow[x] * irow[x];
            if (dp) {
              double* drow = dp + (y + dy) * d.W + dx;
              for (int x = x0; x < x1; ++x) drow[x] += wv * grow[x];
            }
          }
          dw[widx] += acc;
        }
      }
    }
  }
}

struct TrunkCache {
  Dims dims{};
  Tensor xn, a1, h1, a2, h2;
};

void require_input(const Trunk& trunk, const Tensor& x) {
  if (x.rank() != 3 || static_cast<int>(x.dim(0)) != trunk.shape().in_channels) {
    fail(ErrorKind::ShapeMismatch, "model input must be (" + std::to_string(trunk.shape().in_channels) +
                                       ",H,W), got " + shape_string(x.shape()));
  }
}

TrunkCache trunk_forward(const Trunk& trunk, const Tensor& x) {
  require_input(trunk, x);
  const auto s = trunk.shape();
  TrunkCache c;
  c.dims = {static_cast<int>(x.dim(1)), static_cast<int>(x.dim(2))};
  const auto H = x.dim(1), W = x.dim(2);
  c.xn = Tensor(x.shape());
  // mean 0.5, std 0.5
  for (std::size_t k = 0; k < x.size(); ++k) c.xn[k] = (x[k] - 0.5) / 0.5;
  c.a1 = Tensor({static_cast<std::size_t>(s.hidden1), H, W});
  conv3x3_forward(c.xn.storage().data(), s.in_channels, c.dims, trunk.w1.storage().data(), trunk.b1.storage().data(),
                  s.hidden1, c.a1.storage().data());
  c.h1 = c.a1;
  for (auto& v : c.h1.values()) v = v > 0.0 ? v : 0.0;
  c.a2 = Tensor({static_cast<std::size_t>(s.hidden2), H, W});
  conv3x3_forward(c.h1.storage().data(), s.hidden1, c.dims, trunk.w2.storage().data(), trunk.b2.storage().data(),
                  s.hidden2, c.a2.storage().data());
  c.h2 = c.a2;
  for (auto& v : c.h2.values()) v = v > 0.0 ? v : 0.0;
  return c;
}

// dh2 is consumed. Returns the gradient with respect to the raw input.
Tensor trunk_backward(const Trunk& trunk, const TrunkCache& c, Tensor dh2, Trunk& grad) {
  const auto s = trunk.shape();
  for (std::size_t k = 0; k < dh2.size(); ++k)
    if (!(c.a2[k] > 0.0)) dh2[k] = 0.0;
  Tensor dh1(c.h1.shape());
  conv3x3_backward(c.h1.storage().data(), s.hidden1, c.dims, trunk.w2.storage().data(), s.hidden2,
                   dh2.storage().data(), grad.w2.storage().data(), grad.b2.storage().data(), dh1.storage().data());
  for (std::size_t k = 0; k < dh1.size(); ++k)
    if (!(c.a1[k] > 0.0)) dh1[k] = 0.0;
  Tensor dx(c.xn.shape());
  conv3x3_backward(c.xn.storage().data(), s.in_channels, c.dims, trunk.w1.storage().data(), s.hidden1,
                   dh1.storage().data(), grad.w1.storage().data(), grad.b1.storage().data(), dx.storage().data());
  for (auto& v : dx.values()) v /= 0.5;
  return dx;
}

Tensor seg_head(const SegModel& m, const TrunkCache& c) {
  const std::size_t P = c.dims.plane();
  const int K1 = m.out_channels();
  const int Hd = static_cast<int>(m.head_w.dim(1));
  Tensor out({static_cast<std::size_t>(K1), static_cast<std::size_t>(c.dims.H), static_cast<std::size_t>(c.dims.W)});
  for (int o = 0; o < K1; ++o) {
    double* op = out.storage().data() + o * P;
    std::fill(op, op + P, m.head_b[o]);
    for (int h = 0; h < Hd; ++h) {
      const double wv = m.head_w[static_cast<std::size_t>(o) * Hd + h];
      const double* hp = c.h2.storage().data() + h * P;
      for (std::size_t t = 0; t < P; ++t) op[t] += wv * hp[t];
    }
  }
  return out;
}

Tensor seg_head_backward(const SegModel& m, const TrunkCache& c, const Tensor& up, SegModel& grad) {
  const std::size_t P = c.dims.plane();
  const int K1 = m.out_channels();
  const int Hd = static_cast<int>(m.head_w.dim(1));
  Tensor dh2(c.h2.shape());
  for (int o = 0; o < K1; ++o) {
    const double* up_o = up.storage().data() + o * P;
    double s = 0.0;
    for (std::size_t t = 0; t < P; ++t) s += up_o[t];
    grad.head_b[o] += s;
    for (int h = 0; h < Hd; ++h) {
      const double* hp = c.h2.storage().data() + h * P;
      double* dp = dh2.storage().data() + h * P;
      const double wv = m.head_w[static_cast<std::size_t>(o) * Hd + h];
      double acc = 0.0;
      for (std::size_t t = 0; t < P; ++t) {
        acc += up_o[t] * hp[t];
        dp[t] += wv * up_o[t];
      }
      grad.head_w[static_cast<std::size_t>(o) * Hd + h] += acc;
    }
  }
  return dh2;
}

std::vector<double> pooled_features(const TrunkCache& c) {
  const std::size_t P = c.dims.plane();
  const std::size_t Hd = c.h2.dim(0);
  std::vector<double> pooled(Hd, 0.0);
  for (std::size_t h = 0; h < Hd; ++h) {
    const auto plane = c.h2.plane(h);
    pooled[h] = std::accumulate(plane.begin(), plane.end(), 0.0) / static_cast<double>(P);
  }
  return pooled;
}

std::vector<double> row_head(const RowModel& m, const std::vector<double>& pooled) {
  const int C = m.num_classes();
  const std::size_t Hd = pooled.size();
  std::vector<double> out(C);
  for (int c = 0; c < C; ++c) {
    double s = m.head_b[c];
    for (std::size_t h = 0; h < Hd; ++h) s += m.head_w[c * Hd + h] * pooled[h];
    out[c] = s;
  }
  return out;
}

Tensor he_normal(std::vector<std::size_t> shape, int fan_in, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

Trunk init_trunk(const TrunkShape& s, std::mt19937_64& rng) {
  if (s.in_channels <= 0 || s.hidden1 <= 0 || s.hidden2 <= 0) fail(ErrorKind::InvalidArgument, "bad trunk shape");
  Trunk t;
  const auto h1 = static_cast<std::size_t>(s.hidden1), h2 = static_cast<std::size_t>(s.hidden2);
  t.w1 = he_normal({h1, static_cast<std::size_t>(s.in_channels), 3, 3}, s.in_channels * 9, rng);
  t.b1 = Tensor({h1});
  t.w2 = he_normal({h2, h1, 3, 3}, s.hidden1 * 9, rng);
  t.b2 = Tensor({h2});
  return t;
}

Trunk zeros_like(const Trunk& t) {
  return Trunk{Tensor(t.w1.shape()), Tensor(t.b1.shape()), Tensor(t.w2.shape()), Tensor(t.b2.shape())};
}

}  // namespace

TrunkShape Trunk::shape() const {
  return TrunkShape{static_cast<int>(w1.dim(1)), static_cast<int>(w1.dim(0)), static_cast<int>(w2.dim(0))};
}

std::vector<Tensor*> SegModel::parameters() { return {&trunk.w1, &trunk.b1, &trunk.w2, &trunk.b2, &head_w, &head_b}; }
std::vector<const Tensor*> SegModel::parameters() const {
  return {&trunk.w1, &trunk.b1, &trunk.w2, &trunk.b2, &head_w, &head_b};
}
std::vector<Tensor*> RowModel::parameters() { return {&trunk.w1, &trunk.b1, &trunk.w2, &trunk.b2, &head_w, &head_b}; }
std::vector<const Tensor*> RowModel::parameters() const {
  return {&trunk.w1, &trunk.b1, &trunk.w2, &trunk.b2, &head_w, &head_b};
}

SegModel init_seg_model(const TrunkShape& shape, int out_channels, std::uint64_t seed) {
  if (out_channels < 2) fail(ErrorKind::InvalidArgument, "segmenter needs at least 2 output channels");
  std::mt19937_64 rng(seed);
  SegModel m;
  m.trunk = init_trunk(shape, rng);
  m.head_w = he_normal({static_cast<std::size_t>(out_channels), static_cast<std::size_t>(shape.hidden2)}, shape.hidden2,
                       rng);
  m.head_b = Tensor({static_cast<std::size_t>(out_channels)});
  m.seed = seed;
  return m;
}

RowModel init_row_model(const TrunkShape& shape, int num_classes, std::uint64_t seed) {
  if (num_classes < 2) fail(ErrorKind::InvalidArgument, "classifier needs at least 2 classes");
  std::mt19937_64 rng(seed);
  RowModel m;
  m.trunk = init_trunk(shape, rng);
  m.head_w =
      he_normal({static_cast<std::size_t>(num_classes), static_cast<std::size_t>(shape.hidden2)}, shape.hidden2, rng);
  m.head_b = Tensor({static_cast<std::size_t>(num_classes)});
  m.seed = seed;
  return m;
}

SegModel zeros_like(const SegModel& m) {
  return SegModel{zeros_like(m.trunk), Tensor(m.head_w.shape()), Tensor(m.head_b.shape()), m.seed};
}

RowModel zeros_like(const RowModel& m) {
  return RowModel{zeros_like(m.trunk), Tensor(m.head_w.shape()), Tensor(m.head_b.shape()), m.seed};
}

Tensor forward(const SegModel& model, const Tensor& x) { return seg_head(model, trunk_forward(model.trunk, x)); }

SegGradients backward(const SegModel& model, const Tensor& x, const Tensor& upstream, Tensor* logits_out) {
  const TrunkCache cache = trunk_forward(model.trunk, x);
  if (upstream.rank() != 3 || static_cast<int>(upstream.dim(0)) != model.out_channels() ||
      static_cast<int>(upstream.dim(1)) != cache.dims.H || static_cast<int>(upstream.dim(2)) != cache.dims.W) {
    fail(ErrorKind::ShapeMismatch, "upstream gradient has shape " + shape_string(upstream.shape()));
  }
  if (logits_out) *logits_out = seg_head(model, cache);
  SegGradients g{zeros_like(model), Tensor()};
  Tensor dh2 = seg_head_backward(model, cache, upstream, g.params);
  g.input = trunk_backward(model.trunk, cache, std::move(dh2), g.params.trunk);
  return g;
}

std::vector<double> row_forward(const RowModel& model, const Tensor& x) {
  return row_head(model, pooled_features(trunk_forward(model.trunk, x)));
}

RowGradients row_backward(const RowModel& model, const Tensor& x, std::span<const double> upstream) {
  if (static_cast<int>(upstream.size()) != model.num_classes()) {
    fail(ErrorKind::ShapeMismatch, "upstream gradient must have one entry per class");
  }
  const TrunkCache cache = trunk_forward(model.trunk, x);
  const auto pooled = pooled_features(cache);
  RowGradients g{zeros_like(model), Tensor()};
  const std::size_t Hd = pooled.size();
  std::vector<double> dpooled(Hd, 0.0);
  for (int c = 0; c < model.num_classes(); ++c) {
    g.params.head_b[c] += upstream[c];
    for (std::size_t h = 0; h < Hd; ++h) {
      g.params.head_w[c * Hd + h] += upstream[c] * pooled[h];
      dpooled[h] += model.head_w[c * Hd + h] * upstream[c];
    }
  }
  Tensor dh2(cache.h2.shape());
  const double inv = 1.0 / static_cast<double>(cache.dims.plane());
  for (std::size_t h = 0; h < Hd; ++h) {
    for (auto& v : dh2.plane(h)) v = dpooled[h] * inv;
  }
  g.input = trunk_backward(model.trunk, cache, std::move(dh2), g.params.trunk);
  return g;
}

namespace {

void require_labels(const Tensor& logits, const LabelGrid& labels) {
  if (logits.rank() != 3 || static_cast<int>(logits.dim(1)) != labels.height() ||
      static_cast<int>(logits.dim(2)) != labels.width()) {
    fail(ErrorKind::ShapeMismatch, "labels do not match logits " + shape_string(logits.shape()));
  }
  const int K1 = static_cast<int>(logits.dim(0));
  for (int v : labels.storage()) {
    if (v < 0 || v >= K1) fail(ErrorKind::LabelOutOfRange, "label " + std::to_string(v) + " outside 0.." + std::to_string(K1 - 1));
  }
}

// Per-pixel log-softmax of the true label and the full distribution.
template <typename Fn>
void for_each_pixel_softmax(const Tensor& logits, const LabelGrid& labels, Fn&& fn) {
  const std::size_t K1 = logits.dim(0);
  const std::size_t N = logits.dim(1) * logits.dim(2);
  std::vector<double> p(K1);
  for (std::size_t t = 0; t < N; ++t) {
    double mx = logits[t];
    for (std::size_t k = 1; k < K1; ++k) mx = std::max(mx, logits[k * N + t]);
    double sum = 0.0;
    for (std::size_t k = 0; k < K1; ++k) sum += std::exp(logits[k * N + t] - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t k = 0; k < K1; ++k) p[k] = std::exp(logits[k * N + t] - lse);
    const int y = labels[t];
    fn(t, y, logits[y * N + t] - lse, p);
  }
}

}  // namespace

double focal_loss(const Tensor& logits, const LabelGrid& labels, double gamma) {
  require_labels(logits, labels);
  double total = 0.0;
  for_each_pixel_softmax(logits, labels, [&](std::size_t, int, double log_pt, const std::vector<double>&) {
    const double pt = std::exp(log_pt);
    total += -std::pow(1.0 - pt, gamma) * log_pt;
  });
  return total / static_cast<double>(labels.size());
}

Tensor focal_loss_gradient(const Tensor& logits, const LabelGrid& labels, double gamma) {
  require_labels(logits, labels);
  const std::size_t N = labels.size();
  const double inv = 1.0 / static_cast<double>(N);
  Tensor grad(logits.shape());
  for_each_pixel_softmax(logits, labels, [&](std::size_t t, int y, double log_pt, const std::vector<double>& p) {
    const double pt = p[y];
    const double q = 1.0 - pt;
    // dFL/dp_t · p_t
    double coeff = -std::pow(q, gamma);
    if (gamma != 0.0 && q > 0.0) coeff += gamma * std::pow(q, gamma - 1.0) * pt * log_pt;
    for (std::size_t k = 0; k < p.size(); ++k) {
      grad[k * N + t] = coeff * ((static_cast<int>(k) == y ? 1.0 : 0.0) - p[k]) * inv;
    }
  });
  return grad;
}

std::vector<double> softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) sum += (p[k] = std::exp(logits[k] - mx));
  for (auto& v : p) v /= sum;
  return p;
}

double cross_entropy(std::span<const double> logits, int label) {
  if (label < 0 || label >= static_cast<int>(logits.size())) fail(ErrorKind::LabelOutOfRange, "class label out of range");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - mx);
  return mx + std::log(sum) - logits[label];
}

std::vector<double> cross_entropy_gradient(std::span<const double> logits, int label) {
  if (label < 0 || label >= static_cast<int>(logits.size())) fail(ErrorKind::LabelOutOfRange, "class label out of range");
  auto g = softmax(logits);
  g[label] -= 1.0;
  return g;
}

Tensor SegModelOracle::input_gradient(const Tensor& x, const Tensor& weights, Tensor* logits_out) const {
  return backward(model_, x, weights, logits_out).input;
}

Tensor RowModelOracle::loss_gradient(const Tensor& x, int label, double* loss_out) const {
  const auto z = row_forward(model_, x);
  if (loss_out) *loss_out = cross_entropy(z, label);
  return row_backward(model_, x, cross_entropy_gradient(z, label)).input;
}

// ---------------------------------------------------------------------------
// Training

void validate(const TrainConfig& cfg) {
  if (cfg.epochs < 0) fail(ErrorKind::InvalidArgument, "epochs must be >= 0");
  if (cfg.batch_size <= 0) fail(ErrorKind::InvalidArgument, "batch_size must be > 0");
  if (!(cfg.learning_rate >= 0.0)) fail(ErrorKind::InvalidArgument, "learning_rate must be >= 0");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) fail(ErrorKind::InvalidArgument, "momentum must be in [0,1)");
  if (!(cfg.focal_gamma >= 0.0)) fail(ErrorKind::InvalidArgument, "focal_gamma must be >= 0");
  if (!(cfg.poly_power > 0.0)) fail(ErrorKind::InvalidArgument, "poly_power must be > 0");
  if (cfg.adversarial) {
    if (!(cfg.adversarial->epsilon >= 0.0) || cfg.adversarial->steps < 0 ||
        (cfg.adversarial->steps > 0 && !(cfg.adversarial->alpha > 0.0))) {
      fail(ErrorKind::InvalidArgument, "bad adversarial training budget");
    }
  }
}

TrainConfig parse_train_config(const json& doc) {
  if (!doc.is_object()) fail(ErrorKind::ParseError, "train config must be a JSON object");
  TrainConfig cfg;
  try {
    for (const auto& [key, v] : doc.items()) {
      if (key == "epochs") cfg.epochs = v.get<int>();
      else if (key == "batch_size") cfg.batch_size = v.get<int>();
      else if (key == "learning_rate") cfg.learning_rate = v.get<double>();
      else if (key == "momentum") cfg.momentum = v.get<double>();
      else if (key == "focal_gamma") cfg.focal_gamma = v.get<double>();
      else if (key == "schedule") {
        const auto s = v.get<std::string>();
        if (s == "constant") cfg.schedule = LrSchedule::constant;
        else if (s == "polynomial") cfg.schedule = LrSchedule::polynomial;
        else if (s == "multistep") cfg.schedule = LrSchedule::multistep;
        else fail(ErrorKind::ParseError, "unknown schedule '" + s + "'");
      } else if (key == "poly_power") cfg.poly_power = v.get<double>();
      else if (key == "milestones") cfg.milestones = v.get<std::vector<double>>();
      else if (key == "decay_factor") cfg.decay_factor = v.get<double>();
      else if (key == "seed") cfg.seed = v.get<std::uint64_t>();
      else if (key == "threads") cfg.threads = v.get<unsigned>();
      else if (key == "adversarial") {
        if (v.is_null()) continue;
        AdvTrainConfig at;
        for (const auto& [k2, v2] : v.items()) {
          if (k2 == "epsilon") at.epsilon = v2.get<double>();
          else if (k2 == "alpha") at.alpha = v2.get<double>();
          else if (k2 == "steps") at.steps = v2.get<int>();
          else if (k2 == "variant") {
            if (v2.get<std::string>() != "random") fail(ErrorKind::ParseError, "adversarial training uses the random variant");
          } else fail(ErrorKind::ParseError, "unknown adversarial key '" + k2 + "'");
        }
        cfg.adversarial = at;
      } else fail(ErrorKind::ParseError, "unknown train config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::ParseError, std::string("train config: ") + e.what());
  }
  validate(cfg);
  return cfg;
}

json to_json(const TrainConfig& cfg) {
  const char* sched = cfg.schedule == LrSchedule::constant     ? "constant"
                      : cfg.schedule == LrSchedule::polynomial ? "polynomial"
                                                               : "multistep";
  json j{{"epochs", cfg.epochs},         {"batch_size", cfg.batch_size},   {"learning_rate", cfg.learning_rate},
         {"momentum", cfg.momentum},     {"focal_gamma", cfg.focal_gamma}, {"schedule", sched},
         {"poly_power", cfg.poly_power}, {"milestones", cfg.milestones},   {"decay_factor", cfg.decay_factor},
         {"seed", cfg.seed}};
  j["adversarial"] = cfg.adversarial ? json{{"variant", "random"},
                                            {"epsilon", cfg.adversarial->epsilon},
                                            {"alpha", cfg.adversarial->alpha},
                                            {"steps", cfg.adversarial->steps}}
                                     : json(nullptr);
  return j;
}

double learning_rate_at(const TrainConfig& cfg, int epoch, int step_in_epoch, int steps_per_epoch) {
  switch (cfg.schedule) {
    case LrSchedule::constant:
      return cfg.learning_rate;
    case LrSchedule::polynomial: {
      const double total = static_cast<double>(cfg.epochs) * steps_per_epoch;
      const double it = static_cast<double>(epoch) * steps_per_epoch + step_in_epoch;
      return total > 0 ? cfg.learning_rate * std::pow(1.0 - it / total, cfg.poly_power) : cfg.learning_rate;
    }
    case LrSchedule::multistep: {
      double lr = cfg.learning_rate;
      for (double m : cfg.milestones)
        if (epoch >= static_cast<int>(std::lround(m * cfg.epochs))) lr *= cfg.decay_factor;
      return lr;
    }
  }
  return cfg.learning_rate;
}

namespace {

template <typename Model>
void sgd_step(Model& model, Model& velocity, const Model& grad, double lr, double momentum) {
  auto p = model.parameters();
  auto v = velocity.parameters();
  auto g = grad.parameters();
  for (std::size_t i = 0; i < p.size(); ++i) {
    for (std::size_t k = 0; k < p[i]->size(); ++k) {
      (*v[i])[k] = momentum * (*v[i])[k] + (*g[i])[k];
      (*p[i])[k] -= lr * (*v[i])[k];
    }
  }
}

template <typename Model>
void accumulate(Model& into, const Model& g, double scale) {
  auto a = into.parameters();
  auto b = g.parameters();
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < a[i]->size(); ++k) (*a[i])[k] += scale * (*b[i])[k];
}

// Generic minibatch loop; `sample_grad(model, sample, epoch, index)` returns
// (loss, parameter gradient) for one sample.
template <typename Model, typename SampleGrad, typename Eval>
TrainResult<Model> run_sgd(Model model, std::span<const Sample> train, const TrainConfig& cfg, SampleGrad&& sample_grad,
                           Eval&& evaluate) {
  validate(cfg);
  if (train.empty()) fail(ErrorKind::EmptyDataset, "training set is empty");
  TrainResult<Model> result{std::move(model), {}};
  Model velocity = zeros_like(result.model);
  const int N = static_cast<int>(train.size());
  const int steps_per_epoch = (N + cfg.batch_size - 1) / cfg.batch_size;
  std::vector<int> order(N);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    double lr = cfg.learning_rate;
    for (int step = 0; step < steps_per_epoch; ++step) {
      const int begin = step * cfg.batch_size;
      const int end = std::min(N, begin + cfg.batch_size);
      const int B = end - begin;
      std::vector<std::pair<double, Model>> parts(B);
      parallel_for(
          static_cast<std::size_t>(B),
          [&](std::size_t b) {
            const int idx = order[begin + static_cast<int>(b)];
            parts[b] = sample_grad(result.model, train[idx], epoch, idx);
          },
          cfg.threads);
      Model grad = zeros_like(result.model);
      for (const auto& [loss, g] : parts) {
        accumulate(grad, g, 1.0 / B);
        epoch_loss += loss;
      }
      lr = learning_rate_at(cfg, epoch, step, steps_per_epoch);
      if (lr != 0.0) sgd_step(result.model, velocity, grad, lr, cfg.momentum);
    }
    result.history.push_back({epoch, epoch_loss / N, lr, evaluate(result.model)});
  }
  return result;
}

}  // namespace

TrainResult<SegModel> train_segmenter(SegModel model, std::span<const Sample> train, const TrainConfig& cfg,
                                      std::span<const Sample> val) {
  const int K = model.out_channels() - 1;
  auto sample_grad = [&](const SegModel& m, const Sample& s, int epoch, int idx) {
    Tensor image = s.image;
    if (cfg.adversarial && cfg.adversarial->steps > 0) {
      AttackConfig acfg;
      acfg.variant = AttackVariant::random;
      acfg.epsilon = cfg.adversarial->epsilon;
      acfg.alpha = cfg.adversarial->alpha;
      acfg.steps = cfg.adversarial->steps;
      const auto seed = derive_seed(derive_seed(cfg.seed, "adversarial"), (static_cast<std::uint64_t>(epoch) << 32) + idx);
      const auto adv = make_adv_labels(AttackVariant::random, s.parts, K, seed);
      image = modified_dag(s.image, SegModelOracle(m), s.parts, adv, acfg).x_adv;
    }
    const TrunkCache cache = trunk_forward(m.trunk, image);
    const Tensor logits = seg_head(m, cache);
    const double loss = focal_loss(logits, s.parts, cfg.focal_gamma);
    const Tensor up = focal_loss_gradient(logits, s.parts, cfg.focal_gamma);
    SegModel g = zeros_like(m);
    Tensor dh2 = seg_head_backward(m, cache, up, g);
    trunk_backward(m.trunk, cache, std::move(dh2), g.trunk);
    return std::pair<double, SegModel>{loss, std::move(g)};
  };
  auto evaluate = [&](const SegModel& m) -> std::optional<double> {
    if (val.empty()) return std::nullopt;
    return pixel_accuracy(m, val);
  };
  return run_sgd(std::move(model), train, cfg, sample_grad, evaluate);
}

TrainResult<RowModel> train_row(RowModel model, std::span<const Sample> train, const TrainConfig& cfg,
                                std::span<const Sample> val) {
  auto sample_grad = [&](const RowModel& m, const Sample& s, int, int) {
    const auto z = row_forward(m, s.image);
    const double loss = cross_entropy(z, s.category);
    auto g = row_backward(m, s.image, cross_entropy_gradient(z, s.category));
    return std::pair<double, RowModel>{loss, std::move(g.params)};
  };
  auto evaluate = [&](const RowModel& m) -> std::optional<double> {
    if (val.empty()) return std::nullopt;
    return row_accuracy(m, val);
  };
  return run_sgd(std::move(model), train, cfg, sample_grad, evaluate);
}

double pixel_accuracy(const SegModel& model, std::span<const Sample> samples) {
  if (samples.empty()) return 0.0;
  std::vector<std::size_t> correct(samples.size(), 0);
  parallel_for(samples.size(), [&](std::size_t n) {
    const Tensor logits = forward(model, samples[n].image);
    const std::size_t K1 = logits.dim(0), N = logits.dim(1) * logits.dim(2);
    for (std::size_t t = 0; t < N; ++t) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < K1; ++k)
        if (logits[k * N + t] > logits[best * N + t]) best = k;
      if (static_cast<int>(best) == samples[n].parts[t]) ++correct[n];
    }
  });
  const double total = static_cast<double>(samples.size() * samples.front().parts.size());
  return static_cast<double>(std::accumulate(correct.begin(), correct.end(), std::size_t{0})) / total;
}

double row_accuracy(const RowModel& model, std::span<const Sample> samples) {
  if (samples.empty()) return 0.0;
  std::vector<int> hit(samples.size(), 0);
  parallel_for(samples.size(), [&](std::size_t n) {
    hit[n] = predict_from_scores(row_forward(model, samples[n].image)) == samples[n].category ? 1 : 0;
  });
  return static_cast<double>(std::accumulate(hit.begin(), hit.end(), 0)) / static_cast<double>(samples.size());
}

std::vector<Sample> to_object_labels(std::span<const Sample> samples) {
  std::vector<Sample> out(samples.begin(), samples.end());
  for (auto& s : out)
    for (auto& v : s.parts.storage()) v = v != 0 ? s.category + 1 : 0;
  return out;
}

PartCatalog object_catalog(const PartCatalog& parts) {
  PartCatalog cat;
  cat.category_names = parts.category_names;
  for (int c = 0; c < parts.num_categories(); ++c) {
    cat.part_sets.push_back({c + 1});
    cat.part_names.push_back(parts.category_names[c] + "/object");
  }
  cat.num_parts = parts.num_categories();
  return cat;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

const char* kTensorNames[] = {"w1", "b1", "w2", "b2", "head_w", "head_b"};

template <typename Model>
void save_model(const std::filesystem::path& dir, const Model& model, const PartCatalog& catalog, const char* arch) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorKind::IoError, "cannot create " + dir.string());
  const auto params = model.parameters();
  json tensors = json::object();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string file = std::string(kTensorNames[i]) + ".rten";
    rten::write(dir / file, *params[i]);
    tensors[kTensorNames[i]] = file;
  }
  const auto s = model.trunk.shape();
  json manifest{{"arch", arch},
                {"seed", model.seed},
                {"catalog_hash", catalog_hash(catalog)},
                {"in_channels", s.in_channels},
                {"hidden1", s.hidden1},
                {"hidden2", s.hidden2},
                {"outputs", model.head_b.size()},
                {"tensors", tensors}};
  std::ofstream f(dir / "manifest.json");
  if (!f) fail(ErrorKind::IoError, "cannot write manifest in " + dir.string());
  f << manifest.dump(2) << '\n';
}

json read_manifest(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) fail(ErrorKind::IoError, "no manifest.json in " + dir.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    fail(ErrorKind::ParseError, (dir / "manifest.json").string() + ": " + e.what());
  }
}

template <typename Model>
Model load_model(const std::filesystem::path& dir, const PartCatalog& catalog, const std::string& arch, Model model) {
  const json manifest = read_manifest(dir);
  try {
    if (manifest.at("arch").get<std::string>() != arch) {
      fail(ErrorKind::FormatError, "checkpoint arch is '" + manifest.at("arch").get<std::string>() + "', expected '" + arch + "'");
    }
    if (manifest.at("catalog_hash").get<std::string>() != catalog_hash(catalog)) {
      fail(ErrorKind::CatalogHashMismatch, "checkpoint was trained for a different part catalog");
    }
    model.seed = manifest.at("seed").get<std::uint64_t>();
    auto params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor t = rten::read(dir / manifest.at("tensors").at(kTensorNames[i]).get<std::string>());
      if (!t.same_shape(*params[i])) {
        fail(ErrorKind::FormatError, std::string("tensor ") + kTensorNames[i] + " has shape " + shape_string(t.shape()));
      }
      *params[i] = std::move(t);
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::ParseError, (dir / "manifest.json").string() + ": " + e.what());
  }
  return model;
}

TrunkShape manifest_shape(const json& m) {
  try {
    return TrunkShape{m.at("in_channels").get<int>(), m.at("hidden1").get<int>(), m.at("hidden2").get<int>()};
  } catch (const json::exception& e) {
    fail(ErrorKind::ParseError, std::string("manifest: ") + e.what());
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const SegModel& model, const PartCatalog& catalog) {
  save_model(dir, model, catalog, "seg");
}

void save_checkpoint(const std::filesystem::path& dir, const RowModel& model, const PartCatalog& catalog) {
  save_model(dir, model, catalog, "row");
}

SegModel load_seg_checkpoint(const std::filesystem::path& dir, const PartCatalog& catalog) {
  const json m = read_manifest(dir);
  const int outputs = m.value("outputs", 0);
  return load_model(dir, catalog, "seg", init_seg_model(manifest_shape(m), std::max(outputs, 2), 0));
}

RowModel load_row_checkpoint(const std::filesystem::path& dir, const PartCatalog& catalog) {
  const json m = read_manifest(dir);
  const int outputs = m.value("outputs", 0);
  return load_model(dir, catalog, "row", init_row_model(manifest_shape(m), std::max(outputs, 2), 0));
}

std::string checkpoint_arch(const std::filesystem::path& dir) {
  const json m = read_manifest(dir);
  if (!m.contains("arch") || !m["arch"].is_string()) fail(ErrorKind::FormatError, "manifest lacks arch");
  return m["arch"].get<std::string>();
}

}  // namespace rock
