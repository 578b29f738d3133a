#include "rock/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace rock {

namespace {
std::size_t element_count(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}
}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != element_count(shape_)) {
    fail(ErrorKind::ShapeMismatch, "payload of " + std::to_string(data_.size()) + " values does not fit shape " +
                                       shape_string(shape_));
  }
}

std::span<double> Tensor::plane(std::size_t c) {
  const std::size_t n = shape_.at(1) * shape_.at(2);
  return std::span<double>(data_).subspan(c * n, n);
}

std::span<const double> Tensor::plane(std::size_t c) const {
  const std::size_t n = shape_.at(1) * shape_.at(2);
  return std::span<const double>(data_).subspan(c * n, n);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) {
    fail(ErrorKind::ShapeMismatch,
         std::string(what) + ": " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

std::size_t count_set(const Mask& m) {
  return static_cast<std::size_t>(std::count_if(m.storage().begin(), m.storage().end(), [](auto v) { return v != 0; }));
}

Tensor to_tensor(const LabelGrid& g) {
  Tensor t({static_cast<std::size_t>(g.height()), static_cast<std::size_t>(g.width())});
  for (std::size_t k = 0; k < g.size(); ++k) t[k] = g[k];
  return t;
}

LabelGrid to_label_grid(const Tensor& t) {
  if (t.rank() != 2) fail(ErrorKind::ShapeMismatch, "label grid must be rank 2, got " + shape_string(t.shape()));
  LabelGrid g(static_cast<int>(t.dim(0)), static_cast<int>(t.dim(1)));
  for (std::size_t k = 0; k < t.size(); ++k) {
    const double v = t[k];
    if (v != std::floor(v) || v < 0) fail(ErrorKind::FormatError, "label grid holds non-integral value");
    g[k] = static_cast<int>(v);
  }
  return g;
}

double linf_distance(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "linf_distance");
  double d = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) d = std::max(d, std::abs(a[k] - b[k]));
  return d;
}

}  // namespace rock
