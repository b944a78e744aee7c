#pragma once

#include <Eigen/Core>

#include <atomic>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace laf {

using Index = Eigen::Index;

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

// Byte counter for the allocation-hook assertions (peak auxiliary storage,
// "no N×N buffer" checks). Disabled by default; single-writer semantics are
// enough for the tests that use it.
struct AllocStats {
  static std::atomic<bool> enabled;
  static std::atomic<std::int64_t> current_bytes;
  static std::atomic<std::int64_t> peak_bytes;

  static void reset() {
    current_bytes.store(0);
    peak_bytes.store(0);
  }
  static void on_alloc(std::int64_t n) {
    if (!enabled.load(std::memory_order_relaxed)) return;
    const std::int64_t cur = current_bytes.fetch_add(n) + n;
    std::int64_t prev = peak_bytes.load();
    while (prev < cur && !peak_bytes.compare_exchange_weak(prev, cur)) {
    }
  }
  static void on_free(std::int64_t n) {
    if (!enabled.load(std::memory_order_relaxed)) return;
    current_bytes.fetch_sub(n);
  }
};

inline std::atomic<bool> AllocStats::enabled{false};
inline std::atomic<std::int64_t> AllocStats::current_bytes{0};
inline std::atomic<std::int64_t> AllocStats::peak_bytes{0};

template <class T>
struct TrackingAllocator {
  using value_type = T;
  TrackingAllocator() = default;
  template <class U>
  TrackingAllocator(const TrackingAllocator<U>&) {}

  T* allocate(std::size_t n) {
    AllocStats::on_alloc(static_cast<std::int64_t>(n * sizeof(T)));
    return static_cast<T*>(::operator new(n * sizeof(T)));
  }
  void deallocate(T* p, std::size_t n) {
    AllocStats::on_free(static_cast<std::int64_t>(n * sizeof(T)));
    ::operator delete(p);
  }
  bool operator==(const TrackingAllocator&) const { return true; }
};

// Dense row-major tensor. Most of the library treats tensors as 2-D token
// matrices [N×C]; spatial ops additionally take (H, W) with N == H·W in
// raster order (token i -> row i/W, col i%W).
template <class T>
class Tensor {
 public:
  using Scalar = T;
  using EigenMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatMap = Eigen::Map<EigenMatrix>;
  using ConstMatMap = Eigen::Map<const EigenMatrix>;
  using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
  using ConstArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

  Tensor() = default;
  explicit Tensor(std::vector<Index> shape) : shape_(std::move(shape)) {
    for (Index d : shape_) check(d > 0, "Tensor: extents must be positive");
    data_.assign(static_cast<std::size_t>(count(shape_)), T(0));
  }

  static Tensor zeros(std::vector<Index> shape) { return Tensor(std::move(shape)); }

  static Tensor constant(std::vector<Index> shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor ones(std::vector<Index> shape) { return constant(std::move(shape), T(1)); }

  // truncate > 0 re-draws samples with |z| > truncate (in units of stddev).
  static Tensor randn(std::vector<Index> shape, std::mt19937_64& rng, double stddev = 1.0,
                      double truncate = 0.0) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (T& v : t.data_) {
      double z = dist(rng);
      if (truncate > 0.0) {
        while (std::abs(z) > truncate * stddev) z = dist(rng);
      }
      v = static_cast<T>(z);
    }
    return t;
  }

  static Tensor uniform(std::vector<Index> shape, std::mt19937_64& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (T& v : t.data_) v = static_cast<T>(dist(rng));
    return t;
  }

  static Tensor from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    const Index r = static_cast<Index>(rows.size());
    check(r > 0, "from_rows: empty");
    const Index c = static_cast<Index>(rows.begin()->size());
    Tensor t({r, c});
    Index i = 0;
    for (const auto& row : rows) {
      check(static_cast<Index>(row.size()) == c, "from_rows: ragged rows");
      for (T v : row) t.data_[static_cast<std::size_t>(i++)] = v;
    }
    return t;
  }

  static Tensor from_vec(std::vector<T> vals) {
    Tensor t({static_cast<Index>(vals.size())});
    std::copy(vals.begin(), vals.end(), t.data_.begin());
    return t;
  }

  const std::vector<Index>& shape() const { return shape_; }
  Index ndim() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return static_cast<Index>(data_.size()); }
  Index dim(Index i) const { return shape_[static_cast<std::size_t>(i)]; }

  Index rows() const {
    check(ndim() == 2, "rows(): not a matrix");
    return shape_[0];
  }
  Index cols() const {
    check(ndim() == 2, "cols(): not a matrix");
    return shape_[1];
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  T operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  T& operator()(Index i, Index j) { return data_[static_cast<std::size_t>(i * cols() + j)]; }
  T operator()(Index i, Index j) const { return data_[static_cast<std::size_t>(i * cols() + j)]; }

  MatMap matrix() { return MatMap(data(), rows(), cols()); }
  ConstMatMap matrix() const { return ConstMatMap(data(), rows(), cols()); }

  // 2-D view with explicit extents, independent of the stored shape.
  ConstMatMap as_matrix(Index r, Index c) const {
    check(r * c == size(), "as_matrix: size mismatch");
    return ConstMatMap(data(), r, c);
  }

  ArrMap flat() { return ArrMap(data(), size()); }
  ConstArrMap flat() const { return ConstArrMap(data(), size()); }

  Tensor reshape(std::vector<Index> shape) const {
    check(count(shape) == size(), "reshape: element count mismatch");
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  T scalar() const {
    check(size() == 1, "scalar(): tensor is not a scalar");
    return data_[0];
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out = Tensor<U>(shape_);
    for (Index i = 0; i < size(); ++i) out[i] = static_cast<U>(data_[static_cast<std::size_t>(i)]);
    return out;
  }

  static Index count(const std::vector<Index>& shape) {
    Index n = 1;
    for (Index d : shape) n *= d;
    return n;
  }

 private:
  std::vector<Index> shape_;
  std::vector<T, TrackingAllocator<T>> data_;
};

inline std::string shape_str(const std::vector<Index>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// A feature map of H×W pixels with C channels. Storage is the raster-order
// token matrix [H·W × C], so attention and convolution share memory layout.
template <class T>
struct SpatialMap {
  Index h = 0, w = 0, c = 0;
  Tensor<T> tokens;  // shape [h*w, c]

  SpatialMap() = default;
  SpatialMap(Index h_, Index w_, Index c_) : h(h_), w(w_), c(c_), tokens({h_ * w_, c_}) {}
  SpatialMap(Index h_, Index w_, Tensor<T> tok) : h(h_), w(w_), c(tok.cols()), tokens(std::move(tok)) {
    check(tokens.rows() == h * w, "SpatialMap: token count != H*W");
  }

  T& at(Index y, Index x, Index ch) { return tokens(y * w + x, ch); }
  T at(Index y, Index x, Index ch) const { return tokens(y * w + x, ch); }
};

}  // namespace laf
