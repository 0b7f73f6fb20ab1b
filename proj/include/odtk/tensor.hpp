#pragma once

// Minimal dense-tensor math with reverse-mode gradients. Tensors are
// value-semantic handles over shared buffers; every op records a backward
// closure when gradient mode is on. Single-threaded, deterministic
// reduction order throughout.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <unordered_set>
#include <vector>

#include "odtk/errors.hpp"

namespace odtk {

namespace detail {

// Gradient recording is on by default; NoGradGuard turns it off for a scope.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
struct TensorT;

template <class T>
struct TapeNode {
  std::vector<TensorT<T>> parents;
  // Reads the output's grad buffer and accumulates into parent grads.
  std::function<void(const TensorT<T>&)> backward;
};

template <class T>
struct TensorT {
  std::vector<int> shape;
  std::shared_ptr<std::vector<T>> data;
  std::shared_ptr<std::vector<T>> grad;  // allocated iff requires_grad
  std::shared_ptr<TapeNode<T>> node;     // null for leaves
  bool requires_grad = false;

  TensorT() = default;

  static TensorT zeros(std::vector<int> shape, bool requires_grad = false) {
    TensorT t;
    t.shape = std::move(shape);
    t.data = std::make_shared<std::vector<T>>(numel_of(t.shape), T(0));
    t.requires_grad = requires_grad;
    if (requires_grad) t.grad = std::make_shared<std::vector<T>>(t.data->size(), T(0));
    return t;
  }

  static TensorT full(std::vector<int> shape, T value) {
    TensorT t = zeros(std::move(shape));
    std::fill(t.data->begin(), t.data->end(), value);
    return t;
  }

  static TensorT from_values(std::vector<int> shape, std::vector<T> values) {
    if (numel_of(shape) != values.size())
      throw ContractError("tensor: element count does not match shape");
    TensorT t;
    t.shape = std::move(shape);
    t.data = std::make_shared<std::vector<T>>(std::move(values));
    return t;
  }

  static TensorT randn(std::vector<int> shape, std::mt19937& rng, T stddev) {
    TensorT t = zeros(std::move(shape));
    std::normal_distribution<T> dist(T(0), stddev);
    for (auto& v : *t.data) v = dist(rng);
    return t;
  }

  static size_t numel_of(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
      if (d < 0) throw ContractError("tensor: negative dimension");
      n *= static_cast<size_t>(d);
    }
    return n;
  }

  size_t numel() const { return data ? data->size() : 0; }
  int dim(int i) const { return shape.at(static_cast<size_t>(i)); }
  int rank() const { return static_cast<int>(shape.size()); }

  T value() const {
    if (numel() != 1) throw ContractError("tensor: value() requires a scalar");
    return (*data)[0];
  }

  T at(size_t i) const { return (*data)[i]; }
  void set(size_t i, T v) { (*data)[i] = v; }

  void ensure_grad() {
    if (!grad) grad = std::make_shared<std::vector<T>>(data->size(), T(0));
  }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), T(0));
  }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;

namespace detail {

template <class T>
void check_finite(const TensorT<T>& t, const char* op) {
  for (const T v : *t.data) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value in output");
  }
}

template <class T>
TensorT<T> op_output(std::vector<int> shape, std::vector<TensorT<T>> parents, bool force_no_grad = false) {
  bool rg = false;
  if (grad_mode() && !force_no_grad) {
    for (const auto& p : parents)
      if (p.requires_grad) rg = true;
  }
  TensorT<T> out = TensorT<T>::zeros(std::move(shape), rg);
  if (rg) {
    out.node = std::make_shared<TapeNode<T>>();
    out.node->parents = std::move(parents);
  }
  return out;
}

template <class T>
void accumulate(const TensorT<T>& parent, size_t idx, T v) {
  (*parent.grad)[idx] += v;
}

// Row-major C = A(MxK) * B(KxN). i-k-j order so the inner loop vectorizes
// and each output element accumulates in a fixed order.
template <class T>
void gemm_nn(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    T* ci = c + static_cast<size_t>(i) * n;
    std::fill(ci, ci + n, T(0));
    const T* ai = a + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T av = ai[p];
      const T* bp = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <class T>
std::vector<T> transposed(const std::vector<T>& a, int rows, int cols) {
  std::vector<T> t(a.size());
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) t[static_cast<size_t>(j) * rows + i] = a[static_cast<size_t>(i) * cols + j];
  return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  if (!a.same_shape(b)) throw ContractError("add: shape mismatch");
  TensorT<T> out = detail::op_output<T>(a.shape, {a, b});
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] + (*b.data)[i];
  detail::check_finite(out, "add");
  if (out.node) {
    out.node->backward = [](const TensorT<T>& o) {
      const auto& pa = o.node->parents[0];
      const auto& pb = o.node->parents[1];
      const size_t n2 = o.numel();
      if (pa.requires_grad)
        for (size_t i = 0; i < n2; ++i) (*pa.grad)[i] += (*o.grad)[i];
      if (pb.requires_grad)
        for (size_t i = 0; i < n2; ++i) (*pb.grad)[i] += (*o.grad)[i];
    };
  }
  return out;
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  if (!a.same_shape(b)) throw ContractError("sub: shape mismatch");
  TensorT<T> out = detail::op_output<T>(a.shape, {a, b});
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] - (*b.data)[i];
  detail::check_finite(out, "sub");
  if (out.node) {
    out.node->backward = [](const TensorT<T>& o) {
      const auto& pa = o.node->parents[0];
      const auto& pb = o.node->parents[1];
      const size_t n2 = o.numel();
      if (pa.requires_grad)
        for (size_t i = 0; i < n2; ++i) (*pa.grad)[i] += (*o.grad)[i];
      if (pb.requires_grad)
        for (size_t i = 0; i < n2; ++i) (*pb.grad)[i] -= (*o.grad)[i];
    };
  }
  return out;
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  if (!a.same_shape(b)) throw ContractError("mul: shape mismatch");
  TensorT<T> out = detail::op_output<T>(a.shape, {a, b});
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * (*b.data)[i];
  detail::check_finite(out, "mul");
  if (out.node) {
    out.node->backward = [](const TensorT<T>& o) {
      const auto& pa = o.node->parents[0];
      const auto& pb = o.node->parents[1];
      const size_t n2 = o.numel();
      if (pa.requires_grad)
        for (size_t i = 0; i < n2; ++i) (*pa.grad)[i] += (*o.grad)[i] * (*pb.data)[i];
      if (pb.requires_grad)
        for (size_t i = 0; i < n2; ++i) (*pb.grad)[i] += (*o.grad)[i] * (*pa.data)[i];
    };
  }
  return out;
}

template <class T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
  if (!a.same_shape(b)) throw ContractError("div: shape mismatch");
  TensorT<T> out = detail::op_output<T>(a.shape, {a, b});
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] / (*b.data)[i];
  detail::check_finite(out, "div");
  if (out.node) {
    out.node->backward = [](const TensorT<T>& o) {
      const auto& pa = o.node->parents[0];
      const auto& pb = o.node->parents[1];
      const size_t n2 = o.numel();
      for (size_t i = 0; i < n2; ++i) {
        const T bi = (*pb.data)[i];
        const T g = (*o.grad)[i];
        if (pa.requires_grad) (*pa.grad)[i] += g / bi;
        if (pb.requires_grad) (*pb.grad)[i] -= g * (*pa.data)[i] / (bi * bi);
      }
    };
  }
  return out;
}

template <class T>
TensorT<T> mul_scalar(const TensorT<T>& a, T s) {
  TensorT<T> out = detail::op_output<T>(a.shape, {a});
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * s;
  detail::check_finite(out, "mul_scalar");
  if (out.node) {
    out.node->backward = [s](const TensorT<T>& o) {
      const auto& pa = o.node->parents[0];
      if (!pa.requires_grad) return;
      const size_t n2 = o.numel();
      for (size_t i = 0; i < n2; ++i) (*pa.grad)[i] += (*o.grad)[i] * s;
    };
  }
  return out;
}

template <class T>
TensorT<T> add_scalar(const TensorT<T>& a, T s) {
  TensorT<T> out = detail::op_output<T>(a.shape, {a});
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] + s;
  detail::check_finite(out, "add_scalar");
  if (out.node) {
    out.node->backward = [](const TensorT<T>& o) {
      const auto& pa = o.node->parents[0];
      if (!pa.requires_grad) return;
      const size_t n2 = o.numel();
      for (size_t i = 0; i < n2; ++i) (*pa.grad)[i] += (*o.grad)[i];
    };
  }
  return out;
}

// Elementwise max; picks the a-side on exact ties.
template <class T>
TensorT<T> maximum(const TensorT<T>& a, const TensorT<T>& b) {
  if (!a.same_shape(b)) throw ContractError("maximum: shape mismatch");
  TensorT<T> out = detail::op_output<T>(a.shape, {a, b});
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] >= (*b.data)[i] ? (*a.data)[i] : (*b.data)[i];
  detail::check_finite(out, "maximum");
  if (out.node) {
    out.node->backward = [](const TensorT<T>& o) {
      const auto& pa = o.node->parents[0];
      const auto& pb = o.node->parents[1];
      const size_t n2 = o.numel();
      for (size_t i = 0; i < n2; ++i) {
        const bool take_a = (*pa.data)[i] >= (*pb.data)[i];
        if (take_a && pa.requires_grad) (*pa.grad)[i] += (*o.grad)[i];
        if (!take_a && pb.requires_grad) (*pb.grad)[i] += (*o.grad)[i];
      }
    };
  }
  return out;
}

// Elementwise min; picks the a-side on exact ties.
template <class T>
TensorT<T> minimum(const TensorT<T>& a, const TensorT<T>& b) {
  if (!a.same_shape(b)) throw ContractError("minimum: shape mismatch");
  TensorT<T> out = detail::op_output<T>(a.shape, {a, b});
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] <= (*b.data)[i] ? (*a.data)[i] : (*b.data)[i];
  detail::check_finite(out, "minimum");
  if (out.node) {
    out.node->backward = [](const TensorT<T>& o) {
      const auto& pa = o.node->parents[0];
      const auto& pb = o.node->parents[1];
      const size_t n2 = o.numel();
      for (size_t i = 0; i < n2; ++i) {
        const bool take_a = (*pa.data)[i] <= (*pb.data)[i];
        if (take_a && pa.requires_grad) (*pa.grad)[i] += (*o.grad)[i];
        if (!take_a && pb.requires_grad) (*pb.grad)[i] += (*o.grad)[i];
      }
    };
  }
  return out;
}

template <class T>
TensorT<T> clamp_min(const TensorT<T>& a, T lo) {
  TensorT<T> out = detail::op_output<T>(a.shape, {a});
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] < lo ? lo : (*a.data)[i];
  detail::check_finite(out, "clamp_min");
  if (out.node) {
    out.node->backward = [lo](const TensorT<T>& o) {
      const auto& pa = o.node->parents[0];
      if (!pa.requires_grad) return;
      const size_t n2 = o.numel();
      for (size_t i = 0; i < n2; ++i)
        if ((*pa.data)[i] >= lo) (*pa.grad)[i] += (*o.grad)[i];
    };
  }
  return out;
}

template <class T>
TensorT<T> abs_t(const TensorT<T>& a) {
  TensorT<T> out = detail::op_output<T>(a.shape, {a});
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = std::abs((*a.data)[i]);
  detail::check_finite(out, "abs");
  if (out.node) {
    out.node->backward = [](const TensorT<T>& o) {
      const auto& pa = o.node->parents[0];
      if (!pa.requires_grad) return;
      const size_t n2 = o.numel();
      for (size_t i = 0; i < n2; ++i) (*pa.grad)[i] += (*pa.data)[i] >= T(0) ? (*o.grad)[i] : -(*o.grad)[i];
    };
  }
  return out;
}

template <class T>
TensorT<T> relu(const TensorT<T>& a) {
  TensorT<T> out = detail::op_output<T>(a.shape, {a});
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] > T(0) ? (*a.data)[i] : T(0);
  detail::check_finite(out, "relu");
  if (out.node) {
    out.node->backward = [](const TensorT<T>& o) {
      const auto& pa = o.node->parents[0];
      if (!pa.requires_grad) return;
      const size_t n2 = o.numel();
      for (size_t i = 0; i < n2; ++i)
        if ((*pa.data)[i] > T(0)) (*pa.grad)[i] += (*o.grad)[i];
    };
  }
  return out;
}

// Exact GELU: 0.5 x (1 + erf(x / sqrt(2))).
template <class T>
TensorT<T> gelu(const TensorT<T>& a) {
  TensorT<T> out = detail::op_output<T>(a.shape, {a});
  const size_t n = out.numel();
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  for (size_t i = 0; i < n; ++i) {
    const T x = (*a.data)[i];
    (*out.data)[i] = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
  }
  detail::check_finite(out, "gelu");
  if (out.node) {
    out.node->backward = [inv_sqrt2](const TensorT<T>& o) {
      const auto& pa = o.node->parents[0];
      if (!pa.requires_grad) return;
      const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * T(M_PI));
      const size_t n2 = o.numel();
      for (size_t i = 0; i < n2; ++i) {
        const T x = (*pa.data)[i];
        const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
        (*pa.grad)[i] += (*o.grad)[i] * (cdf + x * pdf);
      }
    };
  }
  return out;
}

template <class T>
TensorT<T> sigmoid(const TensorT<T>& a) {
  TensorT<T> out = detail::op_output<T>(a.shape, {a});
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = T(1) / (T(1) + std::exp(-(*a.data)[i]));
  detail::check_finite(out, "sigmoid");
  if (out.node) {
    out.node->backward = [](const TensorT<T>& o) {
      const auto& pa = o.node->parents[0];
      if (!pa.requires_grad) return;
      const size_t n2 = o.numel();
      for (size_t i = 0; i < n2; ++i) {
        const T y = (*o.data)[i];
        (*pa.grad)[i] += (*o.grad)[i] * y * (T(1) - y);
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
TensorT<T> sum(const TensorT<T>& a) {
  TensorT<T> out = detail::op_output<T>({1}, {a});
  T acc = T(0);
  for (const T v : *a.data) acc += v;
  (*out.data)[0] = acc;
  detail::check_finite(out, "sum");
  if (out.node) {
    out.node->backward = [](const TensorT<T>& o) {
      const auto& pa = o.node->parents[0];
      if (!pa.requires_grad) return;
      const T g = (*o.grad)[0];
      for (auto& gi : *pa.grad) gi += g;
    };
  }
  return out;
}

template <class T>
TensorT<T> mean(const TensorT<T>& a) {
  if (a.numel() == 0) throw ContractError("mean: empty tensor");
  return mul_scalar(sum(a), T(1) / static_cast<T>(a.numel()));
}

// ---------------------------------------------------------------------------
// Matrix ops (2-D, row-major)

template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) throw ContractError("matmul: shape mismatch");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  TensorT<T> out = detail::op_output<T>({m, n}, {a, b});
  detail::gemm_nn(a.data->data(), b.data->data(), out.data->data(), m, k, n);
  detail::check_finite(out, "matmul");
  if (out.node) {
    out.node->backward = [m, k, n](const TensorT<T>& o) {
      const auto& pa = o.node->parents[0];
      const auto& pb = o.node->parents[1];
      if (pa.requires_grad) {
        // dA += dC * B^T
        auto bt = detail::transposed(*pb.data, k, n);
        std::vector<T> da(static_cast<size_t>(m) * k);
        detail::gemm_nn(o.grad->data(), bt.data(), da.data(), m, n, k);
        for (size_t i = 0; i < da.size(); ++i) (*pa.grad)[i] += da[i];
      }
      if (pb.requires_grad) {
        // dB += A^T * dC
        auto at = detail::transposed(*pa.data, m, k);
        std::vector<T> db(static_cast<size_t>(k) * n);
        detail::gemm_nn(at.data(), o.grad->data(), db.data(), k, m, n);
        for (size_t i = 0; i < db.size(); ++i) (*pb.grad)[i] += db[i];
      }
    };
  }
  return out;
}

// C = A * B^T with A MxK, B NxK.
template <class T>
TensorT<T> matmul_nt(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) throw ContractError("matmul_nt: shape mismatch");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  TensorT<T> out = detail::op_output<T>({m, n}, {a, b});
  auto bt = detail::transposed(*b.data, n, k);
  detail::gemm_nn(a.data->data(), bt.data(), out.data->data(), m, k, n);
  detail::check_finite(out, "matmul_nt");
  if (out.node) {
    out.node->backward = [m, k, n](const TensorT<T>& o) {
      const auto& pa = o.node->parents[0];
      const auto& pb = o.node->parents[1];
      if (pa.requires_grad) {
        // dA += dC * B
        std::vector<T> da(static_cast<size_t>(m) * k);
        detail::gemm_nn(o.grad->data(), pb.data->data(), da.data(), m, n, k);
        for (size_t i = 0; i < da.size(); ++i) (*pa.grad)[i] += da[i];
      }
      if (pb.requires_grad) {
        // dB += dC^T * A
        auto gt = detail::transposed(*o.grad, m, n);
        std::vector<T> db(static_cast<size_t>(n) * k);
        detail::gemm_nn(gt.data(), pa.data->data(), db.data(), n, m, k);
        for (size_t i = 0; i < db.size(); ++i) (*pb.grad)[i] += db[i];
      }
    };
  }
  return out;
}

template <class T>
TensorT<T> transpose2d(const TensorT<T>& a) {
  if (a.rank() != 2) throw ContractError("transpose2d: rank must be 2");
  const int m = a.dim(0), n = a.dim(1);
  TensorT<T> out = detail::op_output<T>({n, m}, {a});
  *out.data = detail::transposed(*a.data, m, n);
  if (out.node) {
    out.node->backward = [m, n](const TensorT<T>& o) {
      const auto& pa = o.node->parents[0];
      if (!pa.requires_grad) return;
      auto gt = detail::transposed(*o.grad, n, m);
      for (size_t i = 0; i < gt.size(); ++i) (*pa.grad)[i] += gt[i];
    };
  }
  return out;
}

// Adds a length-N row vector to every row of an MxN matrix.
template <class T>
TensorT<T> add_rowvec(const TensorT<T>& a, const TensorT<T>& v) {
  if (a.rank() != 2 || v.numel() != static_cast<size_t>(a.dim(1)))
    throw ContractError("add_rowvec: shape mismatch");
  const int m = a.dim(0), n = a.dim(1);
  TensorT<T> out = detail::op_output<T>(a.shape, {a, v});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      (*out.data)[static_cast<size_t>(i) * n + j] = (*a.data)[static_cast<size_t>(i) * n + j] + (*v.data)[j];
  detail::check_finite(out, "add_rowvec");
  if (out.node) {
    out.node->backward = [m, n](const TensorT<T>& o) {
      const auto& pa = o.node->parents[0];
      const auto& pv = o.node->parents[1];
      if (pa.requires_grad)
        for (size_t i = 0; i < o.numel(); ++i) (*pa.grad)[i] += (*o.grad)[i];
      if (pv.requires_grad)
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) (*pv.grad)[j] += (*o.grad)[static_cast<size_t>(i) * n + j];
    };
  }
  return out;
}

template <class T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
  return add_rowvec(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// Shape ops

template <class T>
TensorT<T> reshape(const TensorT<T>& a, std::vector<int> shape) {
  if (TensorT<T>::numel_of(shape) != a.numel()) throw ContractError("reshape: element count mismatch");
  TensorT<T> out = detail::op_output<T>(std::move(shape), {a});
  *out.data = *a.data;
  if (out.node) {
    out.node->backward = [](const TensorT<T>& o) {
      const auto& pa = o.node->parents[0];
      if (!pa.requires_grad) return;
      for (size_t i = 0; i < o.numel(); ++i) (*pa.grad)[i] += (*o.grad)[i];
    };
  }
  return out;
}

// Concatenation along axis 0. All operands must share trailing dimensions.
template <class T>
TensorT<T> concat_rows(const std::vector<TensorT<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no operands");
  std::vector<int> tail(parts[0].shape.begin() + 1, parts[0].shape.end());
  int rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != parts[0].rank() ||
        !std::equal(tail.begin(), tail.end(), p.shape.begin() + 1))
      throw ContractError("concat_rows: trailing dimensions differ");
    rows += p.dim(0);
  }
  std::vector<int> shape = {rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  TensorT<T> out = detail::op_output<T>(std::move(shape), parts);
  size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data->begin(), p.data->end(), out.data->begin() + static_cast<long>(off));
    off += p.numel();
  }
  if (out.node) {
    out.node->backward = [](const TensorT<T>& o) {
      size_t off2 = 0;
      for (const auto& p : o.node->parents) {
        if (p.requires_grad)
          for (size_t i = 0; i < p.numel(); ++i) (*p.grad)[i] += (*o.grad)[off2 + i];
        off2 += p.numel();
      }
    };
  }
  return out;
}

template <class T>
TensorT<T> slice_rows(const TensorT<T>& a, int begin, int len) {
  if (a.rank() < 1 || begin < 0 || len < 0 || begin + len > a.dim(0))
    throw ContractError("slice_rows: out of range");
  size_t row = a.numel() / static_cast<size_t>(std::max(1, a.dim(0)));
  std::vector<int> shape = a.shape;
  shape[0] = len;
  TensorT<T> out = detail::op_output<T>(std::move(shape), {a});
  std::copy(a.data->begin() + static_cast<long>(row * begin),
            a.data->begin() + static_cast<long>(row * (begin + len)), out.data->begin());
  if (out.node) {
    out.node->backward = [begin, row](const TensorT<T>& o) {
      const auto& pa = o.node->parents[0];
      if (!pa.requires_grad) return;
      const size_t base = row * static_cast<size_t>(begin);
      for (size_t i = 0; i < o.numel(); ++i) (*pa.grad)[base + i] += (*o.grad)[i];
    };
  }
  return out;
}

// Column slice / concat for 2-D tensors (per-head views).
template <class T>
TensorT<T> slice_cols(const TensorT<T>& a, int begin, int len) {
  if (a.rank() != 2 || begin < 0 || len < 0 || begin + len > a.dim(1))
    throw ContractError("slice_cols: out of range");
  const int m = a.dim(0), n = a.dim(1);
  TensorT<T> out = detail::op_output<T>({m, len}, {a});
  for (int i = 0; i < m; ++i)
    std::copy(a.data->begin() + static_cast<long>(static_cast<size_t>(i) * n + begin),
              a.data->begin() + static_cast<long>(static_cast<size_t>(i) * n + begin + len),
              out.data->begin() + static_cast<long>(static_cast<size_t>(i) * len));
  if (out.node) {
    out.node->backward = [begin, m, n, len](const TensorT<T>& o) {
      const auto& pa = o.node->parents[0];
      if (!pa.requires_grad) return;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < len; ++j)
          (*pa.grad)[static_cast<size_t>(i) * n + begin + j] += (*o.grad)[static_cast<size_t>(i) * len + j];
    };
  }
  return out;
}

template <class T>
TensorT<T> concat_cols(const std::vector<TensorT<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no operands");
  const int m = parts[0].dim(0);
  int n = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != m) throw ContractError("concat_cols: row count differs");
    n += p.dim(1);
  }
  TensorT<T> out = detail::op_output<T>({m, n}, parts);
  int col = 0;
  for (const auto& p : parts) {
    const int pn = p.dim(1);
    for (int i = 0; i < m; ++i)
      std::copy(p.data->begin() + static_cast<long>(static_cast<size_t>(i) * pn),
                p.data->begin() + static_cast<long>(static_cast<size_t>(i) * pn + pn),
                out.data->begin() + static_cast<long>(static_cast<size_t>(i) * n + col));
    col += pn;
  }
  if (out.node) {
    out.node->backward = [m, n](const TensorT<T>& o) {
      int col2 = 0;
      for (const auto& p : o.node->parents) {
        const int pn = p.dim(1);
        if (p.requires_grad)
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < pn; ++j)
              (*p.grad)[static_cast<size_t>(i) * pn + j] += (*o.grad)[static_cast<size_t>(i) * n + col2 + j];
        col2 += pn;
      }
    };
  }
  return out;
}

// Picks elements at the given flat indices into a 1-D tensor.
template <class T>
TensorT<T> gather(const TensorT<T>& a, std::vector<size_t> indices) {
  for (size_t idx : indices)
    if (idx >= a.numel()) throw ContractError("gather: index out of range");
  TensorT<T> out = detail::op_output<T>({static_cast<int>(indices.size())}, {a});
  for (size_t i = 0; i < indices.size(); ++i) (*out.data)[i] = (*a.data)[indices[i]];
  if (out.node) {
    out.node->backward = [indices](const TensorT<T>& o) {
      const auto& pa = o.node->parents[0];
      if (!pa.requires_grad) return;
      for (size_t i = 0; i < indices.size(); ++i) (*pa.grad)[indices[i]] += (*o.grad)[i];
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax / layer_norm

// Softmax along the given axis, max-subtracted for stability.
template <class T>
TensorT<T> softmax(const TensorT<T>& x, int axis) {
  if (axis < 0 || axis >= x.rank()) throw ContractError("softmax: axis out of range");
  detail::check_finite(x, "softmax(input)");
  const int d = x.dim(axis);
  size_t inner = 1, outer = 1;
  for (int i = axis + 1; i < x.rank(); ++i) inner *= static_cast<size_t>(x.dim(i));
  for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(x.dim(i));
  TensorT<T> out = detail::op_output<T>(x.shape, {x});
  const auto& xd = *x.data;
  auto& od = *out.data;
  for (size_t o = 0; o < outer; ++o) {
    for (size_t in = 0; in < inner; ++in) {
      const size_t base = o * static_cast<size_t>(d) * inner + in;
      T mx = xd[base];
      for (int i = 1; i < d; ++i) mx = std::max(mx, xd[base + static_cast<size_t>(i) * inner]);
      T z = T(0);
      for (int i = 0; i < d; ++i) {
        const T e = std::exp(xd[base + static_cast<size_t>(i) * inner] - mx);
        od[base + static_cast<size_t>(i) * inner] = e;
        z += e;
      }
      for (int i = 0; i < d; ++i) od[base + static_cast<size_t>(i) * inner] /= z;
    }
  }
  detail::check_finite(out, "softmax");
  if (out.node) {
    out.node->backward = [d, inner, outer](const TensorT<T>& o) {
      const auto& pa = o.node->parents[0];
      if (!pa.requires_grad) return;
      const auto& y = *o.data;
      const auto& gy = *o.grad;
      for (size_t ou = 0; ou < outer; ++ou) {
        for (size_t in = 0; in < inner; ++in) {
          const size_t base = ou * static_cast<size_t>(d) * inner + in;
          T dot = T(0);
          for (int i = 0; i < d; ++i) {
            const size_t idx = base + static_cast<size_t>(i) * inner;
            dot += gy[idx] * y[idx];
          }
          for (int i = 0; i < d; ++i) {
            const size_t idx = base + static_cast<size_t>(i) * inner;
            (*pa.grad)[idx] += y[idx] * (gy[idx] - dot);
          }
        }
      }
    };
  }
  return out;
}

// Last-axis layer normalization with learned gain/bias; population variance.
template <class T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gain, const TensorT<T>& bias, T eps) {
  if (x.rank() < 1) throw ContractError("layer_norm: rank must be >= 1");
  const int d = x.dim(x.rank() - 1);
  if (gain.numel() != static_cast<size_t>(d) || bias.numel() != static_cast<size_t>(d))
    throw ContractError("layer_norm: gain/bias must match last axis");
  if (eps < T(0)) throw ContractError("layer_norm: eps must be >= 0");
  const size_t rows = x.numel() / static_cast<size_t>(d);
  TensorT<T> out = detail::op_output<T>(x.shape, {x, gain, bias});
  const auto& xd = *x.data;
  auto& od = *out.data;
  for (size_t r = 0; r < rows; ++r) {
    const size_t base = r * static_cast<size_t>(d);
    T mu = T(0);
    for (int i = 0; i < d; ++i) mu += xd[base + i];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (int i = 0; i < d; ++i) {
      const T c = xd[base + i] - mu;
      var += c * c;
    }
    var /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(var + eps);
    for (int i = 0; i < d; ++i)
      od[base + i] = (xd[base + i] - mu) * inv * (*gain.data)[i] + (*bias.data)[i];
  }
  detail::check_finite(out, "layer_norm");
  if (out.node) {
    out.node->backward = [d, rows, eps](const TensorT<T>& o) {
      const auto& px = o.node->parents[0];
      const auto& pg = o.node->parents[1];
      const auto& pb = o.node->parents[2];
      const auto& xd2 = *px.data;
      const auto& gy = *o.grad;
      for (size_t r = 0; r < rows; ++r) {
        const size_t base = r * static_cast<size_t>(d);
        T mu = T(0);
        for (int i = 0; i < d; ++i) mu += xd2[base + i];
        mu /= static_cast<T>(d);
        T var = T(0);
        for (int i = 0; i < d; ++i) {
          const T c = xd2[base + i] - mu;
          var += c * c;
        }
        var /= static_cast<T>(d);
        const T inv = T(1) / std::sqrt(var + eps);
        // dxhat, then the two reduction terms of the layer-norm gradient
        T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
        for (int i = 0; i < d; ++i) {
          const T xhat = (xd2[base + i] - mu) * inv;
          const T dxhat = gy[base + i] * (*pg.data)[i];
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat;
          if (pg.requires_grad) (*pg.grad)[i] += gy[base + i] * xhat;
          if (pb.requires_grad) (*pb.grad)[i] += gy[base + i];
        }
        if (px.requires_grad) {
          for (int i = 0; i < d; ++i) {
            const T xhat = (xd2[base + i] - mu) * inv;
            const T dxhat = gy[base + i] * (*pg.data)[i];
            (*px.grad)[base + i] +=
                inv * (dxhat - (sum_dxhat + xhat * sum_dxhat_xhat) / static_cast<T>(d));
          }
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv2d: x CinxHxW, w CoutxCinxKhxKw, b Cout; stride 1, symmetric zero pad.

template <class T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b, int pad) {
  if (x.rank() != 3 || w.rank() != 4) throw ContractError("conv2d: bad ranks");
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != cin || b.numel() != static_cast<size_t>(cout)) throw ContractError("conv2d: shape mismatch");
  const int oh = h + 2 * pad - kh + 1, ow = wd + 2 * pad - kw + 1;
  if (oh <= 0 || ow <= 0) throw ContractError("conv2d: output collapsed");
  TensorT<T> out = detail::op_output<T>({cout, oh, ow}, {x, w, b});
  const auto& xd = *x.data;
  const auto& wdt = *w.data;
  auto& od = *out.data;
  for (int co = 0; co < cout; ++co) {
    const T bias = (*b.data)[co];
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        T acc = bias;
        for (int ci = 0; ci < cin; ++ci) {
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = oy + ky - pad;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ox + kx - pad;
              if (ix < 0 || ix >= wd) continue;
              acc += xd[(static_cast<size_t>(ci) * h + iy) * wd + ix] *
                     wdt[((static_cast<size_t>(co) * cin + ci) * kh + ky) * kw + kx];
            }
          }
        }
        od[(static_cast<size_t>(co) * oh + oy) * ow + ox] = acc;
      }
    }
  }
  detail::check_finite(out, "conv2d");
  if (out.node) {
    out.node->backward = [cin, h, wd, cout, kh, kw, pad, oh, ow](const TensorT<T>& o) {
      const auto& px = o.node->parents[0];
      const auto& pw = o.node->parents[1];
      const auto& pb = o.node->parents[2];
      const auto& gy = *o.grad;
      for (int co = 0; co < cout; ++co) {
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox) {
            const T g = gy[(static_cast<size_t>(co) * oh + oy) * ow + ox];
            if (pb.requires_grad) (*pb.grad)[co] += g;
            for (int ci = 0; ci < cin; ++ci) {
              for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy + ky - pad;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  const int ix = ox + kx - pad;
                  if (ix < 0 || ix >= wd) continue;
                  const size_t xi = (static_cast<size_t>(ci) * h + iy) * wd + ix;
                  const size_t wi = ((static_cast<size_t>(co) * cin + ci) * kh + ky) * kw + kx;
                  if (px.requires_grad) (*px.grad)[xi] += g * (*pw.data)[wi];
                  if (pw.requires_grad) (*pw.grad)[wi] += g * (*px.data)[xi];
                }
              }
            }
          }
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backward pass

template <class T>
void backward(TensorT<T>& loss) {
  if (loss.numel() != 1) throw ContractError("backward: loss must be a scalar");
  if (!loss.requires_grad) throw ContractError("backward: loss does not require grad");
  // Iterative post-order DFS over tape nodes.
  std::vector<TensorT<T>> order;
  std::unordered_set<const void*> seen;
  struct Frame {
    TensorT<T> t;
    size_t next_child;
  };
  std::vector<Frame> stack;
  stack.push_back({loss, 0});
  seen.insert(loss.data.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.t.node && f.next_child < f.t.node->parents.size()) {
      TensorT<T> child = f.t.node->parents[f.next_child++];
      if (child.requires_grad && !seen.count(child.data.get())) {
        seen.insert(child.data.get());
        stack.push_back({std::move(child), 0});
      }
    } else {
      order.push_back(f.t);
      stack.pop_back();
    }
  }
  loss.ensure_grad();
  (*loss.grad)[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (it->node && it->node->backward) it->node->backward(*it);
  }
}

// ---------------------------------------------------------------------------
// ParamStore

template <class T>
class ParamStoreT {
 public:
  TensorT<T>& create(const std::string& name, TensorT<T> value) {
    if (params_.count(name)) throw ContractError("param store: duplicate name " + name);
    value.requires_grad = true;
    value.ensure_grad();
    auto [it, ok] = params_.emplace(name, std::move(value));
    (void)ok;
    return it->second;
  }

  TensorT<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("param store: unknown name " + name);
    return it->second;
  }

  const TensorT<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("param store: unknown name " + name);
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) > 0; }

  void zero_grads() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  long long total_elements() const {
    long long n = 0;
    for (const auto& [name, t] : params_) n += static_cast<long long>(t.numel());
    return n;
  }

  size_t size() const { return params_.size(); }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  // std::map keeps iteration lexicographic, which fixes the order of every
  // serialization and optimizer sweep.
  std::map<std::string, TensorT<T>> params_;
};

using ParamStore = ParamStoreT<float>;
using DParamStore = ParamStoreT<double>;

// ---------------------------------------------------------------------------
// gradient_check: analytic reverse-mode grads vs central finite differences.
// loss_fn must be a deterministic scalar function of the store.

template <class LossFn>
double gradient_check(LossFn&& loss_fn, DParamStore& params, double eps) {
  DTensor loss = loss_fn(params);
  if (loss.numel() != 1) throw ContractError("gradient_check: loss must be scalar");
  {
    NoGradGuard ng;
    DTensor again = loss_fn(params);
    if (again.value() != loss.value())
      throw ContractError("gradient_check: loss_fn is not deterministic");
  }
  params.zero_grads();
  backward(loss);
  // Snapshot analytic grads, then probe every element with +/- eps.
  std::map<std::string, std::vector<double>> analytic;
  for (auto& [name, t] : params) analytic[name] = *t.grad;
  double worst = 0.0;
  NoGradGuard ng;
  for (auto& [name, t] : params) {
    for (size_t i = 0; i < t.numel(); ++i) {
      const double orig = (*t.data)[i];
      (*t.data)[i] = orig + eps;
      const double up = loss_fn(params).value();
      (*t.data)[i] = orig - eps;
      const double dn = loss_fn(params).value();
      (*t.data)[i] = orig;
      const double fd = (up - dn) / (2.0 * eps);
      const double an = analytic[name][i];
      const double err = std::abs(an - fd) / std::max(1e-8, std::abs(an) + std::abs(fd));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace odtk
