#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <utility>

#include "vamoe/gemm.hpp"
#include "vamoe/tensor.hpp"

namespace vamoe {

// Handle into a tape. Only meaningful for the tape that produced it.
struct Var {
  i64 id = -1;
  bool valid() const { return id >= 0; }
};

// Integer index tensor (top-k selections, gather indices). Not
// differentiable, so it lives outside the Tensor<T> float family.
struct IntTensor {
  std::vector<i64> shape;
  std::vector<std::int32_t> data;

  static IntTensor zeros(std::vector<i64> s) {
    IntTensor t;
    i64 n = 1;
    for (i64 d : s) n *= d;
    t.shape = std::move(s);
    t.data.assign(size_t(n), 0);
    return t;
  }
  i64 numel() const { return i64(data.size()); }
  i64 last_dim() const { return shape.back(); }
  i64 rows() const { return last_dim() == 0 ? 0 : numel() / last_dim(); }
  std::int32_t& at2(i64 r, i64 c) { return data[size_t(r * shape.back() + c)]; }
  std::int32_t at2(i64 r, i64 c) const { return data[size_t(r * shape.back() + c)]; }
};

inline std::vector<i64> broadcast_shape(const std::vector<i64>& a,
                                        const std::vector<i64>& b) {
  size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
  std::vector<i64> out(r);
  for (size_t i = 0; i < r; ++i) {
    i64 da = i < r - ra ? 1 : a[i - (r - ra)];
    i64 db = i < r - rb ? 1 : b[i - (r - rb)];
    if (da == db) {
      out[i] = da;
    } else if (da == 1) {
      out[i] = db;
    } else if (db == 1) {
      out[i] = da;
    } else {
      fail(ErrorKind::shape_mismatch, "shapes " + shape_str(a) + " and " +
                                          shape_str(b) + " do not broadcast");
    }
  }
  return out;
}

namespace detail {

constexpr int kMaxRank = 4;

struct BcPlan {
  std::array<i64, kMaxRank> dims{};   // output dims, left-padded with 1
  std::array<i64, kMaxRank> sa{};     // strides into a (0 on broadcast axes)
  std::array<i64, kMaxRank> sb{};
  i64 n = 1;
  bool same = false;  // both operands already have the output shape
};

inline BcPlan make_bc_plan(const std::vector<i64>& a, const std::vector<i64>& b,
                           const std::vector<i64>& out) {
  require(out.size() <= size_t(kMaxRank), ErrorKind::invalid_argument,
          "broadcast rank > 4 unsupported");
  BcPlan p;
  size_t r = out.size();
  p.dims.fill(1);
  p.sa.fill(0);
  p.sb.fill(0);
  for (size_t i = 0; i < r; ++i) p.dims[kMaxRank - r + i] = out[i];
  auto fill_strides = [&](const std::vector<i64>& s, std::array<i64, kMaxRank>& st) {
    i64 stride = 1;
    for (size_t i = s.size(); i-- > 0;) {
      size_t pos = kMaxRank - r + (r - s.size()) + i;
      st[pos] = (s[i] == 1 && p.dims[pos] != 1) ? 0 : stride;
      stride *= s[i];
    }
  };
  fill_strides(a, p.sa);
  fill_strides(b, p.sb);
  for (i64 d : out) p.n *= d;
  p.same = (a == out && b == out);
  return p;
}

}  // namespace detail

// Result of a top-k selection: integer channel ids plus the selected
// values as a differentiable variable.
struct TopK {
  IntTensor indices;
  Var values;
};

// Define-by-run reverse-mode tape. Records every differentiable operation
// in execution order; backward() replays it in exact reverse, summing
// gradients for values used more than once. Single-threaded per tape;
// distinct tapes may run concurrently over shared read-only parameters.
template <typename T>
class Tape {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated on first accumulation during backward
    bool requires_grad = false;
    std::function<void(Tape&, const Tensor<T>&)> backward;
    Parameter<T>* bound = nullptr;
  };

  Var leaf(Tensor<T> v, bool requires_grad = false) {
    Node nd;
    nd.value = std::move(v);
    nd.requires_grad = requires_grad;
    nodes_.push_back(std::move(nd));
    return Var{i64(nodes_.size()) - 1};
  }

  Var param(Parameter<T>& p) {
    Node nd;
    nd.value = p.value;  // copy keeps the tape self-contained
    nd.requires_grad = !p.frozen;
    nd.bound = &p;
    nodes_.push_back(std::move(nd));
    Var v{i64(nodes_.size()) - 1};
    if (!p.frozen) bindings_.push_back(v.id);
    return v;
  }

  Var constant(T v) { return leaf(Tensor<T>::scalar(v)); }

  const Tensor<T>& value(Var v) const { return nodes_[size_t(v.id)].value; }
  const Tensor<T>& grad(Var v) const {
    const Node& nd = nodes_[size_t(v.id)];
    require(!nd.grad.data.empty(), ErrorKind::invalid_argument,
            "gradient not populated; run backward first");
    return nd.grad;
  }
  bool has_grad(Var v) const { return !nodes_[size_t(v.id)].grad.data.empty(); }
  i64 size() const { return i64(nodes_.size()); }

  // ---- elementwise ----

  Var add(Var a, Var b) { return binary(a, b, BinOp::add); }
  Var sub(Var a, Var b) { return binary(a, b, BinOp::sub); }
  Var mul(Var a, Var b) { return binary(a, b, BinOp::mul); }
  Var div(Var a, Var b) { return binary(a, b, BinOp::div); }

  Var add_scalar(Var a, T s) {
    const Tensor<T>& x = value(a);
    Tensor<T> out = x;
    for (auto& v : out.data) v += s;
    ensure_finite(out, "add_scalar");
    return unary_result(a, std::move(out),
                        [](Tape& t, i64 pid, const Tensor<T>&, const Tensor<T>& g) {
                          t.acc_same(pid, g);
                        });
  }

  Var mul_scalar(Var a, T s) {
    const Tensor<T>& x = value(a);
    Tensor<T> out = x;
    for (auto& v : out.data) v *= s;
    ensure_finite(out, "mul_scalar");
    return unary_result(a, std::move(out),
                        [s](Tape& t, i64 pid, const Tensor<T>&, const Tensor<T>& g) {
                          Tensor<T>& gb = t.gbuf(pid);
                          for (i64 i = 0; i < g.numel(); ++i) gb[i] += g[i] * s;
                        });
  }

  Var neg(Var a) { return mul_scalar(a, T(-1)); }

  Var exp_(Var a) {
    const Tensor<T>& x = value(a);
    Tensor<T> out = x;
    for (auto& v : out.data) v = std::exp(v);
    ensure_finite(out, "exp");
    return unary_result(
        a, std::move(out),
        [](Tape& t, i64 pid, const Tensor<T>& y, const Tensor<T>& g) {
          Tensor<T>& gb = t.gbuf(pid);
          for (i64 i = 0; i < g.numel(); ++i) gb[i] += g[i] * y[i];
        });
  }

  Var log_(Var a) {
    const Tensor<T>& x = value(a);
    for (const T& v : x.data) {
      require(v > T(0), ErrorKind::domain_error, "log of non-positive value");
    }
    Tensor<T> out = x;
    for (auto& v : out.data) v = std::log(v);
    ensure_finite(out, "log");
    i64 aid = a.id;
    return unary_result(
        a, std::move(out),
        [aid](Tape& t, i64 pid, const Tensor<T>&, const Tensor<T>& g) {
          const Tensor<T>& xin = t.nodes_[size_t(aid)].value;
          Tensor<T>& gb = t.gbuf(pid);
          for (i64 i = 0; i < g.numel(); ++i) gb[i] += g[i] / xin[i];
        });
  }

  Var square(Var a) {
    const Tensor<T>& x = value(a);
    Tensor<T> out = x;
    for (auto& v : out.data) v *= v;
    ensure_finite(out, "square");
    i64 aid = a.id;
    return unary_result(
        a, std::move(out),
        [aid](Tape& t, i64 pid, const Tensor<T>&, const Tensor<T>& g) {
          const Tensor<T>& xin = t.nodes_[size_t(aid)].value;
          Tensor<T>& gb = t.gbuf(pid);
          for (i64 i = 0; i < g.numel(); ++i) gb[i] += T(2) * g[i] * xin[i];
        });
  }

  // Exact GELU, x * Phi(x) with the Gaussian CDF.
  Var gelu(Var a) {
    const Tensor<T>& x = value(a);
    Tensor<T> out = x;
    for (auto& v : out.data) {
      double xd = double(v);
      v = T(xd * 0.5 * (1.0 + std::erf(xd * 0.7071067811865475)));
    }
    ensure_finite(out, "gelu");
    i64 aid = a.id;
    return unary_result(
        a, std::move(out),
        [aid](Tape& t, i64 pid, const Tensor<T>&, const Tensor<T>& g) {
          const Tensor<T>& xin = t.nodes_[size_t(aid)].value;
          Tensor<T>& gb = t.gbuf(pid);
          for (i64 i = 0; i < g.numel(); ++i) {
            double xd = double(xin[i]);
            double cdf = 0.5 * (1.0 + std::erf(xd * 0.7071067811865475));
            double pdf = 0.3989422804014327 * std::exp(-0.5 * xd * xd);
            gb[i] += g[i] * T(cdf + xd * pdf);
          }
        });
  }

  // ---- linear algebra ----

  // a: [m,k] or [batch,m,k]; b: [k,n].
  Var matmul(Var a, Var b) {
    const Tensor<T>& A = value(a);
    const Tensor<T>& B = value(b);
    require(B.rank() == 2, ErrorKind::shape_mismatch, "matmul rhs must be rank 2");
    require(A.rank() == 2 || A.rank() == 3, ErrorKind::shape_mismatch,
            "matmul lhs must be rank 2 or 3");
    i64 batch = A.rank() == 3 ? A.shape[0] : 1;
    i64 m = A.shape[size_t(A.rank() - 2)];
    i64 k = A.shape[size_t(A.rank() - 1)];
    require(k == B.shape[0], ErrorKind::shape_mismatch,
            "matmul inner dimensions " + shape_str(A.shape) + " x " +
                shape_str(B.shape));
    i64 n = B.shape[1];
    std::vector<i64> oshape = A.rank() == 3 ? std::vector<i64>{batch, m, n}
                                            : std::vector<i64>{m, n};
    Tensor<T> out = Tensor<T>::zeros(oshape);
    for (i64 bi = 0; bi < batch; ++bi) {
      detail::gemm_nn_acc(A.data.data() + bi * m * k, B.data.data(),
                          out.data.data() + bi * m * n, m, k, n);
    }
    ensure_finite(out, "matmul");
    i64 aid = a.id, bid = b.id;
    return result({a, b}, std::move(out),
                  [aid, bid, batch, m, k, n](Tape& t, const Tensor<T>& g) {
                    const Tensor<T>& A = t.nodes_[size_t(aid)].value;
                    const Tensor<T>& B = t.nodes_[size_t(bid)].value;
                    if (t.wants(aid)) {
                      Tensor<T>& ga = t.gbuf(aid);
                      for (i64 bi = 0; bi < batch; ++bi) {
                        detail::gemm_nt_acc(g.data.data() + bi * m * n,
                                            B.data.data(),
                                            ga.data.data() + bi * m * k, m, n, k);
                      }
                    }
                    if (t.wants(bid)) {
                      Tensor<T>& gb = t.gbuf(bid);
                      for (i64 bi = 0; bi < batch; ++bi) {
                        detail::gemm_tn_acc(A.data.data() + bi * m * k,
                                            g.data.data() + bi * m * n,
                                            gb.data.data(), m, k, n);
                      }
                    }
                  });
  }

  // Batched a[b,m,k] * b[b,n,k]^T -> [b,m,n].
  Var bmm_nt(Var a, Var b) {
    const Tensor<T>& A = value(a);
    const Tensor<T>& B = value(b);
    require(A.rank() == 3 && B.rank() == 3 && A.shape[0] == B.shape[0] &&
                A.shape[2] == B.shape[2],
            ErrorKind::shape_mismatch, "bmm_nt shapes");
    i64 batch = A.shape[0], m = A.shape[1], k = A.shape[2], n = B.shape[1];
    Tensor<T> out = Tensor<T>::zeros({batch, m, n});
    for (i64 bi = 0; bi < batch; ++bi) {
      detail::gemm_nt_acc(A.data.data() + bi * m * k, B.data.data() + bi * n * k,
                          out.data.data() + bi * m * n, m, k, n);
    }
    ensure_finite(out, "bmm_nt");
    i64 aid = a.id, bid = b.id;
    return result({a, b}, std::move(out),
                  [aid, bid, batch, m, k, n](Tape& t, const Tensor<T>& g) {
                    const Tensor<T>& A = t.nodes_[size_t(aid)].value;
                    const Tensor<T>& B = t.nodes_[size_t(bid)].value;
                    if (t.wants(aid)) {
                      Tensor<T>& ga = t.gbuf(aid);
                      for (i64 bi = 0; bi < batch; ++bi) {
                        detail::gemm_nn_acc(g.data.data() + bi * m * n,
                                            B.data.data() + bi * n * k,
                                            ga.data.data() + bi * m * k, m, n, k);
                      }
                    }
                    if (t.wants(bid)) {
                      Tensor<T>& gb = t.gbuf(bid);
                      for (i64 bi = 0; bi < batch; ++bi) {
                        detail::gemm_tn_acc(g.data.data() + bi * m * n,
                                            A.data.data() + bi * m * k,
                                            gb.data.data() + bi * n * k, m, n, k);
                      }
                    }
                  });
  }

  // Batched a[b,m,k] * b[b,k,n] -> [b,m,n].
  Var bmm_nn(Var a, Var b) {
    const Tensor<T>& A = value(a);
    const Tensor<T>& B = value(b);
    require(A.rank() == 3 && B.rank() == 3 && A.shape[0] == B.shape[0] &&
                A.shape[2] == B.shape[1],
            ErrorKind::shape_mismatch, "bmm_nn shapes");
    i64 batch = A.shape[0], m = A.shape[1], k = A.shape[2], n = B.shape[2];
    Tensor<T> out = Tensor<T>::zeros({batch, m, n});
    for (i64 bi = 0; bi < batch; ++bi) {
      detail::gemm_nn_acc(A.data.data() + bi * m * k, B.data.data() + bi * k * n,
                          out.data.data() + bi * m * n, m, k, n);
    }
    ensure_finite(out, "bmm_nn");
    i64 aid = a.id, bid = b.id;
    return result({a, b}, std::move(out),
                  [aid, bid, batch, m, k, n](Tape& t, const Tensor<T>& g) {
                    const Tensor<T>& A = t.nodes_[size_t(aid)].value;
                    const Tensor<T>& B = t.nodes_[size_t(bid)].value;
                    if (t.wants(aid)) {
                      Tensor<T>& ga = t.gbuf(aid);
                      for (i64 bi = 0; bi < batch; ++bi) {
                        detail::gemm_nt_acc(g.data.data() + bi * m * n,
                                            B.data.data() + bi * k * n,
                                            ga.data.data() + bi * m * k, m, n, k);
                      }
                    }
                    if (t.wants(bid)) {
                      Tensor<T>& gb = t.gbuf(bid);
                      for (i64 bi = 0; bi < batch; ++bi) {
                        detail::gemm_tn_acc(A.data.data() + bi * m * k,
                                            g.data.data() + bi * m * n,
                                            gb.data.data() + bi * k * n, m, k, n);
                      }
                    }
                  });
  }

  // ---- shape ----

  Var reshape(Var a, std::vector<i64> shape) {
    Tensor<T> out = value(a).reshaped(std::move(shape));
    std::vector<i64> old_shape = value(a).shape;
    return unary_result(a, std::move(out),
                        [old_shape](Tape& t, i64 pid, const Tensor<T>&,
                                    const Tensor<T>& g) {
                          Tensor<T>& gb = t.gbuf(pid);
                          for (i64 i = 0; i < g.numel(); ++i) gb[i] += g[i];
                        });
  }

  // Rank-3 axis permutation (copy).
  Var permute3(Var a, std::array<int, 3> perm) {
    const Tensor<T>& x = value(a);
    require(x.rank() == 3, ErrorKind::shape_mismatch, "permute3 needs rank 3");
    std::vector<i64> os = {x.shape[size_t(perm[0])], x.shape[size_t(perm[1])],
                           x.shape[size_t(perm[2])]};
    Tensor<T> out = Tensor<T>::zeros(os);
    i64 d0 = x.shape[0], d1 = x.shape[1], d2 = x.shape[2];
    std::array<i64, 3> src_stride = {d1 * d2, d2, 1};
    std::array<i64, 3> st = {src_stride[size_t(perm[0])],
                             src_stride[size_t(perm[1])],
                             src_stride[size_t(perm[2])]};
    i64 idx = 0;
    for (i64 i = 0; i < os[0]; ++i) {
      for (i64 j = 0; j < os[1]; ++j) {
        i64 base = i * st[0] + j * st[1];
        for (i64 kk = 0; kk < os[2]; ++kk) out[idx++] = x[base + kk * st[2]];
      }
    }
    std::array<int, 3> inv{};
    for (int i = 0; i < 3; ++i) inv[size_t(perm[size_t(i)])] = i;
    (void)d0;
    return unary_result(
        a, std::move(out),
        [st, os](Tape& t, i64 pid, const Tensor<T>&, const Tensor<T>& g) {
          Tensor<T>& gb = t.gbuf(pid);
          i64 idx = 0;
          for (i64 i = 0; i < os[0]; ++i) {
            for (i64 j = 0; j < os[1]; ++j) {
              i64 base = i * st[0] + j * st[1];
              for (i64 kk = 0; kk < os[2]; ++kk) gb[base + kk * st[2]] += g[idx++];
            }
          }
        });
  }

  // ---- normalization / routing ----

  // Per-row zero mean, unit variance over the last axis (eps added to the
  // variance), then affine gain/bias.
  Var layer_norm(Var x, Var gain, Var bias, T eps = T(1e-5)) {
    const Tensor<T>& X = value(x);
    i64 C = X.last_dim();
    i64 rows = X.rows();
    require(value(gain).numel() == C && value(bias).numel() == C,
            ErrorKind::shape_mismatch, "layer_norm affine length");
    Tensor<T> out = Tensor<T>::zeros(X.shape);
    Tensor<T> rstd = Tensor<T>::zeros({rows});
    Tensor<T> xhat = Tensor<T>::zeros(X.shape);
    const T* gp = value(gain).data.data();
    const T* bp = value(bias).data.data();
    for (i64 r = 0; r < rows; ++r) {
      const T* xr = X.data.data() + r * C;
      T mean = T(0);
      for (i64 c = 0; c < C; ++c) mean += xr[c];
      mean /= T(C);
      T var = T(0);
      for (i64 c = 0; c < C; ++c) {
        T d = xr[c] - mean;
        var += d * d;
      }
      var /= T(C);
      T rs = T(1) / std::sqrt(var + eps);
      rstd[r] = rs;
      T* xh = xhat.data.data() + r * C;
      T* o = out.data.data() + r * C;
      for (i64 c = 0; c < C; ++c) {
        xh[c] = (xr[c] - mean) * rs;
        o[c] = xh[c] * gp[c] + bp[c];
      }
    }
    ensure_finite(out, "layer_norm");
    i64 xid = x.id, gid = gain.id, bid = bias.id;
    return result(
        {x, gain, bias}, std::move(out),
        [xid, gid, bid, rstd, xhat, C, rows](Tape& t, const Tensor<T>& g) {
          const T* gp = t.nodes_[size_t(gid)].value.data.data();
          for (i64 r = 0; r < rows; ++r) {
            const T* gr = g.data.data() + r * C;
            const T* xh = xhat.data.data() + r * C;
            if (t.wants(xid)) {
              Tensor<T>& gx = t.gbuf(xid);
              T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
              for (i64 c = 0; c < C; ++c) {
                T dxh = gr[c] * gp[c];
                sum_dxhat += dxh;
                sum_dxhat_xhat += dxh * xh[c];
              }
              T inv_c = T(1) / T(C);
              T* gxr = gx.data.data() + r * C;
              for (i64 c = 0; c < C; ++c) {
                T dxh = gr[c] * gp[c];
                gxr[c] += rstd[r] * (dxh - sum_dxhat * inv_c -
                                     xh[c] * sum_dxhat_xhat * inv_c);
              }
            }
            if (t.wants(gid)) {
              Tensor<T>& gg = t.gbuf(gid);
              for (i64 c = 0; c < C; ++c) gg[c] += gr[c] * xh[c];
            }
            if (t.wants(bid)) {
              Tensor<T>& gb = t.gbuf(bid);
              for (i64 c = 0; c < C; ++c) gb[c] += gr[c];
            }
          }
        });
  }

  // Row-wise softmax over the last axis, max-subtracted for stability.
  Var softmax(Var x) {
    const Tensor<T>& X = value(x);
    i64 C = X.last_dim();
    i64 rows = X.rows();
    Tensor<T> out = Tensor<T>::zeros(X.shape);
    for (i64 r = 0; r < rows; ++r) {
      const T* xr = X.data.data() + r * C;
      T* o = out.data.data() + r * C;
      T mx = xr[0];
      for (i64 c = 1; c < C; ++c) mx = std::max(mx, xr[c]);
      T sum = T(0);
      for (i64 c = 0; c < C; ++c) {
        o[c] = std::exp(xr[c] - mx);
        sum += o[c];
      }
      T inv = T(1) / sum;
      for (i64 c = 0; c < C; ++c) o[c] *= inv;
    }
    ensure_finite(out, "softmax");
    i64 xid = x.id;
    return result({x}, std::move(out), [xid, C, rows](Tape& t, const Tensor<T>& g) {
      if (!t.wants(xid)) return;
      // y is this node's own value; it is the node right after xid's
      // consumers were recorded, so fetch it through the closure's node.
      const Tensor<T>& y = t.nodes_[size_t(t.nodes_.size())].value;  // overwritten below
      (void)y;
      (void)g;
      (void)C;
      (void)rows;
    });
  }

  // Top-k entries per row in descending value order, ties broken toward
  // the lower channel index. Gradients flow only to selected positions.
  TopK topk(Var x, i64 k) {
    const Tensor<T>& X = value(x);
    i64 C = X.last_dim();
    require(k >= 1 && k <= C, ErrorKind::invalid_argument,
            "topk k=" + std::to_string(k) + " out of range for C=" +
                std::to_string(C));
    i64 rows = X.rows();
    std::vector<i64> oshape = X.shape;
    oshape.back() = k;
    IntTensor idx = IntTensor::zeros(oshape);
    Tensor<T> vals = Tensor<T>::zeros(oshape);
    std::vector<std::pair<T, std::int32_t>> scratch(size_t(C));
    for (i64 r = 0; r < rows; ++r) {
      const T* xr = X.data.data() + r * C;
      for (i64 c = 0; c < C; ++c) scratch[size_t(c)] = {xr[c], std::int32_t(c)};
      std::partial_sort(scratch.begin(), scratch.begin() + k, scratch.end(),
                        [](const auto& a, const auto& b) {
                          if (a.first != b.first) return a.first > b.first;
                          return a.second < b.second;
                        });
      for (i64 s = 0; s < k; ++s) {
        idx.data[size_t(r * k + s)] = scratch[size_t(s)].second;
        vals.data[size_t(r * k + s)] = scratch[size_t(s)].first;
      }
    }
    i64 xid = x.id;
    IntTensor idx_copy = idx;
    Var v = result({x}, std::move(vals),
                   [xid, idx_copy, C, k, rows](Tape& t, const Tensor<T>& g) {
                     if (!t.wants(xid)) return;
                     Tensor<T>& gx = t.gbuf(xid);
                     for (i64 r = 0; r < rows; ++r) {
                       for (i64 s = 0; s < k; ++s) {
                         gx[r * C + idx_copy.data[size_t(r * k + s)]] +=
                             g[r * k + s];
                       }
                     }
                   });
    return TopK{std::move(idx), v};
  }

  // Per-row channel selection: out[r,s] = x[r, idx[r,s]]. Backward
  // scatter-adds into the source.
  Var gather_last(Var x, const IntTensor& idx) {
    const Tensor<T>& X = value(x);
    i64 C = X.last_dim();
    i64 rows = X.rows();
    i64 k = idx.last_dim();
    require(idx.rows() == rows, ErrorKind::shape_mismatch,
            "gather index rows mismatch");
    for (std::int32_t v : idx.data) {
      require(v >= 0 && i64(v) < C, ErrorKind::index_out_of_range,
              "gather index " + std::to_string(v) + " out of [0," +
                  std::to_string(C) + ")");
    }
    std::vector<i64> oshape = X.shape;
    oshape.back() = k;
    Tensor<T> out = Tensor<T>::zeros(oshape);
    for (i64 r = 0; r < rows; ++r) {
      for (i64 s = 0; s < k; ++s) {
        out[r * k + s] = X[r * C + idx.data[size_t(r * k + s)]];
      }
    }
    i64 xid = x.id;
    IntTensor idx_copy = idx;
    return result({x}, std::move(out),
                  [xid, idx_copy, C, k, rows](Tape& t, const Tensor<T>& g) {
                    if (!t.wants(xid)) return;
                    Tensor<T>& gx = t.gbuf(xid);
                    for (i64 r = 0; r < rows; ++r) {
                      for (i64 s = 0; s < k; ++s) {
                        gx[r * C + idx_copy.data[size_t(r * k + s)]] +=
                            g[r * k + s];
                      }
                    }
                  });
  }

  // ---- convolution ----

  // Cross-correlation of x[H,W,Cin] with kernel[kh,kw,Cin,Cout], zero
  // padding `pad`, square stride. H and W must divide by the stride.
  Var conv2d(Var x, Var kernel, i64 stride, i64 pad = 1) {
    const Tensor<T>& X = value(x);
    const Tensor<T>& K = value(kernel);
    require(X.rank() == 3 && K.rank() == 4, ErrorKind::shape_mismatch,
            "conv2d expects x[H,W,Cin], kernel[kh,kw,Cin,Cout]");
    i64 H = X.shape[0], W = X.shape[1], Cin = X.shape[2];
    i64 kh = K.shape[0], kw = K.shape[1];
    require(K.shape[2] == Cin, ErrorKind::shape_mismatch,
            "conv2d kernel Cin " + std::to_string(K.shape[2]) +
                " != input channels " + std::to_string(Cin));
    require(stride >= 1 && H % stride == 0 && W % stride == 0,
            ErrorKind::invalid_argument,
            "conv2d spatial dims must divide by stride");
    i64 Cout = K.shape[3];
    i64 Ho = H / stride, Wo = W / stride;
    Tensor<T> out = Tensor<T>::zeros({Ho, Wo, Cout});
    conv_forward(X, K, out, H, W, Cin, kh, kw, Cout, Ho, Wo, stride, pad);
    ensure_finite(out, "conv2d");
    i64 xid = x.id, kid = kernel.id;
    return result(
        {x, kernel}, std::move(out),
        [xid, kid, H, W, Cin, kh, kw, Cout, Ho, Wo, stride, pad](
            Tape& t, const Tensor<T>& g) {
          const Tensor<T>& X = t.nodes_[size_t(xid)].value;
          const Tensor<T>& K = t.nodes_[size_t(kid)].value;
          Tensor<T>* gx = t.wants(xid) ? &t.gbuf(xid) : nullptr;
          Tensor<T>* gk = t.wants(kid) ? &t.gbuf(kid) : nullptr;
          if (!gx && !gk) return;
          for (i64 oi = 0; oi < Ho; ++oi) {
            for (i64 oj = 0; oj < Wo; ++oj) {
              const T* go = g.data.data() + (oi * Wo + oj) * Cout;
              for (i64 di = 0; di < kh; ++di) {
                i64 ii = oi * stride + di - pad;
                if (ii < 0 || ii >= H) continue;
                for (i64 dj = 0; dj < kw; ++dj) {
                  i64 jj = oj * stride + dj - pad;
                  if (jj < 0 || jj >= W) continue;
                  const T* xr = X.data.data() + (ii * W + jj) * Cin;
                  for (i64 ci = 0; ci < Cin; ++ci) {
                    const T* kr = K.data.data() + ((di * kw + dj) * Cin + ci) * Cout;
                    if (gx) {
                      T acc = T(0);
                      for (i64 co = 0; co < Cout; ++co) acc += kr[co] * go[co];
                      (*gx)[(ii * W + jj) * Cin + ci] += acc;
                    }
                    if (gk) {
                      T* gkr = gk->data.data() + ((di * kw + dj) * Cin + ci) * Cout;
                      const T xv = xr[ci];
                      for (i64 co = 0; co < Cout; ++co) gkr[co] += xv * go[co];
                    }
                  }
                }
              }
            }
          }
        });
  }

  // [h,w,C*p*p] -> [h*p, w*p, C]; channel layout c*p*p + py*p + px.
  Var depth_to_space(Var x, i64 p) {
    const Tensor<T>& X = value(x);
    require(X.rank() == 3 && X.shape[2] % (p * p) == 0, ErrorKind::shape_mismatch,
            "depth_to_space channel count must divide by p^2");
    i64 h = X.shape[0], w = X.shape[1], C = X.shape[2] / (p * p);
    Tensor<T> out = Tensor<T>::zeros({h * p, w * p, C});
    i64 Cpp = X.shape[2];
    for (i64 i = 0; i < h; ++i) {
      for (i64 j = 0; j < w; ++j) {
        const T* xr = X.data.data() + (i * w + j) * Cpp;
        for (i64 c = 0; c < C; ++c) {
          for (i64 py = 0; py < p; ++py) {
            for (i64 px = 0; px < p; ++px) {
              out[(((i * p + py) * (w * p)) + (j * p + px)) * C + c] =
                  xr[c * p * p + py * p + px];
            }
          }
        }
      }
    }
    return unary_result(
        a_of(x), std::move(out),
        [h, w, C, p, Cpp](Tape& t, i64 pid, const Tensor<T>&, const Tensor<T>& g) {
          Tensor<T>& gx = t.gbuf(pid);
          for (i64 i = 0; i < h; ++i) {
            for (i64 j = 0; j < w; ++j) {
              T* gr = gx.data.data() + (i * w + j) * Cpp;
              for (i64 c = 0; c < C; ++c) {
                for (i64 py = 0; py < p; ++py) {
                  for (i64 px = 0; px < p; ++px) {
                    gr[c * p * p + py * p + px] +=
                        g[(((i * p + py) * (w * p)) + (j * p + px)) * C + c];
                  }
                }
              }
            }
          }
        });
  }

  // Concatenate along `axis`; all other dims must match.
  Var concat(Var a, Var b, int axis) {
    const Tensor<T>& A = value(a);
    const Tensor<T>& B = value(b);
    require(A.rank() == B.rank() && axis >= 0 && axis < A.rank(),
            ErrorKind::shape_mismatch, "concat rank/axis");
    for (int i = 0; i < A.rank(); ++i) {
      if (i != axis) {
        require(A.shape[size_t(i)] == B.shape[size_t(i)],
                ErrorKind::shape_mismatch, "concat non-axis dims must match");
      }
    }
    std::vector<i64> os = A.shape;
    os[size_t(axis)] += B.shape[size_t(axis)];
    i64 outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= A.shape[size_t(i)];
    for (int i = axis + 1; i < A.rank(); ++i) inner *= A.shape[size_t(i)];
    i64 da = A.shape[size_t(axis)] * inner, db = B.shape[size_t(axis)] * inner;
    Tensor<T> out = Tensor<T>::zeros(os);
    for (i64 o = 0; o < outer; ++o) {
      std::memcpy(out.data.data() + o * (da + db), A.data.data() + o * da,
                  size_t(da) * sizeof(T));
      std::memcpy(out.data.data() + o * (da + db) + da, B.data.data() + o * db,
                  size_t(db) * sizeof(T));
    }
    i64 aid = a.id, bid = b.id;
    return result({a, b}, std::move(out),
                  [aid, bid, outer, da, db](Tape& t, const Tensor<T>& g) {
                    if (t.wants(aid)) {
                      Tensor<T>& ga = t.gbuf(aid);
                      for (i64 o = 0; o < outer; ++o) {
                        const T* gp = g.data.data() + o * (da + db);
                        T* ap = ga.data.data() + o * da;
                        for (i64 i = 0; i < da; ++i) ap[i] += gp[i];
                      }
                    }
                    if (t.wants(bid)) {
                      Tensor<T>& gb = t.gbuf(bid);
                      for (i64 o = 0; o < outer; ++o) {
                        const T* gp = g.data.data() + o * (da + db) + da;
                        T* bp = gb.data.data() + o * db;
                        for (i64 i = 0; i < db; ++i) bp[i] += gp[i];
                      }
                    }
                  });
  }

  // ---- reductions ----

  Var sum_all(Var a) {
    const Tensor<T>& x = value(a);
    // Pairwise-free simple accumulation; order fixed for determinism.
    T acc = T(0);
    for (const T& v : x.data) acc += v;
    Tensor<T> out = Tensor<T>::scalar(acc);
    ensure_finite(out, "sum");
    return unary_result(a, std::move(out),
                        [](Tape& t, i64 pid, const Tensor<T>&, const Tensor<T>& g) {
                          Tensor<T>& gb = t.gbuf(pid);
                          const T gv = g[0];
                          for (auto& v : gb.data) v += gv;
                        });
  }

  Var mean_all(Var a) {
    i64 n = value(a).numel();
    return mul_scalar(sum_all(a), T(1) / T(n));
  }

  // ---- backward ----

  void backward(Var out) {
    require(value(out).numel() == 1, ErrorKind::invalid_argument,
            "backward requires a scalar output");
    require(nodes_[size_t(out.id)].requires_grad, ErrorKind::invalid_argument,
            "output does not depend on any differentiable input");
    gbuf(out.id)[0] += T(1);
    for (i64 i = out.id; i >= 0; --i) {
      Node& nd = nodes_[size_t(i)];
      if (!nd.requires_grad || !nd.backward) continue;
      if (nd.grad.data.empty()) continue;
      nd.backward(*this, nd.grad);
    }
  }

  // Adds tape gradients into the bound parameters' grad accumulators.
  void add_param_grads(T scale = T(1)) {
    for (i64 id : bindings_) {
      Node& nd = nodes_[size_t(id)];
      if (nd.grad.data.empty()) continue;
      Tensor<T>& pg = nd.bound->grad;
      for (i64 i = 0; i < nd.grad.numel(); ++i) pg[i] += scale * nd.grad[i];
    }
  }

  // (parameter, gradient) pairs for external, order-stable reduction.
  void collect_param_grads(
      std::vector<std::pair<Parameter<T>*, const Tensor<T>*>>& out) const {
    for (i64 id : bindings_) {
      const Node& nd = nodes_[size_t(id)];
      if (nd.grad.data.empty()) continue;
      out.emplace_back(nd.bound, &nd.grad);
    }
  }

  bool wants(i64 id) const { return nodes_[size_t(id)].requires_grad; }

  Tensor<T>& gbuf(i64 id) {
    Node& nd = nodes_[size_t(id)];
    if (nd.grad.data.empty()) nd.grad = Tensor<T>::zeros(nd.value.shape);
    return nd.grad;
  }

 private:
  enum class BinOp { add, sub, mul, div };

  static Var a_of(Var v) { return v; }

  Var result(std::initializer_list<Var> parents, Tensor<T> out,
             std::function<void(Tape&, const Tensor<T>&)> bw) {
    bool req = false;
    for (Var p : parents) req = req || nodes_[size_t(p.id)].requires_grad;
    Node nd;
    nd.value = std::move(out);
    nd.requires_grad = req;
    if (req) nd.backward = std::move(bw);
    nodes_.push_back(std::move(nd));
    return Var{i64(nodes_.size()) - 1};
  }

  // Helper for single-parent ops whose backward needs (tape, parent id,
  // own value, own grad).
  template <typename F>
  Var unary_result(Var a, Tensor<T> out, F&& f) {
    i64 aid = a.id;
    bool req = nodes_[size_t(aid)].requires_grad;
    Node nd;
    nd.value = std::move(out);
    nd.requires_grad = req;
    i64 self_id = i64(nodes_.size());
    if (req) {
      nd.backward = [aid, self_id, f = std::forward<F>(f)](Tape& t,
                                                           const Tensor<T>& g) {
        if (!t.wants(aid)) return;
        f(t, aid, t.nodes_[size_t(self_id)].value, g);
      };
    }
    nodes_.push_back(std::move(nd));
    return Var{self_id};
  }

  void acc_same(i64 pid, const Tensor<T>& g) {
    Tensor<T>& gb = gbuf(pid);
    for (i64 i = 0; i < g.numel(); ++i) gb[i] += g[i];
  }

  // Reduce `g` (shaped like the broadcast output) onto parent `pid`.
  void acc_reduced(i64 pid, const Tensor<T>& g) {
    Tensor<T>& gb = gbuf(pid);
    if (gb.shape == g.shape) {
      for (i64 i = 0; i < g.numel(); ++i) gb[i] += g[i];
      return;
    }
    if (gb.numel() == 1) {
      T acc = T(0);
      for (const T& v : g.data) acc += v;
      gb[0] += acc;
      return;
    }
    detail::BcPlan p = detail::make_bc_plan(gb.shape, gb.shape, g.shape);
    // p.sa holds strides of the parent within the output iteration space.
    i64 idx = 0;
    for (i64 i0 = 0; i0 < p.dims[0]; ++i0) {
      for (i64 i1 = 0; i1 < p.dims[1]; ++i1) {
        for (i64 i2 = 0; i2 < p.dims[2]; ++i2) {
          i64 base = i0 * p.sa[0] + i1 * p.sa[1] + i2 * p.sa[2];
          for (i64 i3 = 0; i3 < p.dims[3]; ++i3) {
            gb[base + i3 * p.sa[3]] += g[idx++];
          }
        }
      }
    }
  }

  Var binary(Var a, Var b, BinOp op) {
    const Tensor<T>& A = value(a);
    const Tensor<T>& B = value(b);
    std::vector<i64> os = broadcast_shape(A.shape, B.shape);
    detail::BcPlan plan = detail::make_bc_plan(A.shape, B.shape, os);
    Tensor<T> out = Tensor<T>::zeros(os);
    const T* pa = A.data.data();
    const T* pb = B.data.data();
    T* po = out.data.data();
    if (plan.same) {
      i64 n = plan.n;
      switch (op) {
        case BinOp::add:
          for (i64 i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
          break;
        case BinOp::sub:
          for (i64 i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
          break;
        case BinOp::mul:
          for (i64 i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
          break;
        case BinOp::div:
          for (i64 i = 0; i < n; ++i) po[i] = pa[i] / pb[i];
          break;
      }
    } else {
      i64 idx = 0;
      for (i64 i0 = 0; i0 < plan.dims[0]; ++i0) {
        for (i64 i1 = 0; i1 < plan.dims[1]; ++i1) {
          for (i64 i2 = 0; i2 < plan.dims[2]; ++i2) {
            i64 ba = i0 * plan.sa[0] + i1 * plan.sa[1] + i2 * plan.sa[2];
            i64 bb = i0 * plan.sb[0] + i1 * plan.sb[1] + i2 * plan.sb[2];
            for (i64 i3 = 0; i3 < plan.dims[3]; ++i3) {
              T va = pa[ba + i3 * plan.sa[3]];
              T vb = pb[bb + i3 * plan.sb[3]];
              switch (op) {
                case BinOp::add: po[idx] = va + vb; break;
                case BinOp::sub: po[idx] = va - vb; break;
                case BinOp::mul: po[idx] = va * vb; break;
                case BinOp::div: po[idx] = va / vb; break;
              }
              ++idx;
            }
          }
        }
      }
    }
    const char* opname = op == BinOp::add   ? "add"
                         : op == BinOp::sub ? "sub"
                         : op == BinOp::mul ? "mul"
                                            : "div";
    ensure_finite(out, opname);
    i64 aid = a.id, bid = b.id;
    return result({a, b}, std::move(out), [aid, bid, op, plan](Tape& t,
                                                               const Tensor<T>& g) {
      const Tensor<T>& A = t.nodes_[size_t(aid)].value;
      const Tensor<T>& B = t.nodes_[size_t(bid)].value;
      auto expand_read = [&plan](const Tensor<T>& src, i64 i0, i64 i1, i64 i2,
                                 i64 i3, const std::array<i64, 4>& st) -> T {
        return src[i0 * st[0] + i1 * st[1] + i2 * st[2] + i3 * st[3]];
      };
      switch (op) {
        case BinOp::add:
          if (t.wants(aid)) t.acc_reduced(aid, g);
          if (t.wants(bid)) t.acc_reduced(bid, g);
          break;
        case BinOp::sub: {
          if (t.wants(aid)) t.acc_reduced(aid, g);
          if (t.wants(bid)) {
            Tensor<T> ng = g;
            for (auto& v : ng.data) v = -v;
            t.acc_reduced(bid, ng);
          }
          break;
        }
        case BinOp::mul: {
          if (t.wants(aid)) {
            Tensor<T> c = Tensor<T>::zeros(g.shape);
            i64 idx = 0;
            for (i64 i0 = 0; i0 < plan.dims[0]; ++i0)
              for (i64 i1 = 0; i1 < plan.dims[1]; ++i1)
                for (i64 i2 = 0; i2 < plan.dims[2]; ++i2)
                  for (i64 i3 = 0; i3 < plan.dims[3]; ++i3, ++idx)
                    c[idx] = g[idx] * expand_read(B, i0, i1, i2, i3, plan.sb);
            t.acc_reduced(aid, c);
          }
          if (t.wants(bid)) {
            Tensor<T> c = Tensor<T>::zeros(g.shape);
            i64 idx = 0;
            for (i64 i0 = 0; i0 < plan.dims[0]; ++i0)
              for (i64 i1 = 0; i1 < plan.dims[1]; ++i1)
                for (i64 i2 = 0; i2 < plan.dims[2]; ++i2)
                  for (i64 i3 = 0; i3 < plan.dims[3]; ++i3, ++idx)
                    c[idx] = g[idx] * expand_read(A, i0, i1, i2, i3, plan.sa);
            t.acc_reduced(bid, c);
          }
          break;
        }
        case BinOp::div: {
          if (t.wants(aid)) {
            Tensor<T> c = Tensor<T>::zeros(g.shape);
            i64 idx = 0;
            for (i64 i0 = 0; i0 < plan.dims[0]; ++i0)
              for (i64 i1 = 0; i1 < plan.dims[1]; ++i1)
                for (i64 i2 = 0; i2 < plan.dims[2]; ++i2)
                  for (i64 i3 = 0; i3 < plan.dims[3]; ++i3, ++idx)
                    c[idx] = g[idx] / expand_read(B, i0, i1, i2, i3, plan.sb);
            t.acc_reduced(aid, c);
          }
          if (t.wants(bid)) {
            Tensor<T> c = Tensor<T>::zeros(g.shape);
            i64 idx = 0;
            for (i64 i0 = 0; i0 < plan.dims[0]; ++i0)
              for (i64 i1 = 0; i1 < plan.dims[1]; ++i1)
                for (i64 i2 = 0; i2 < plan.dims[2]; ++i2)
                  for (i64 i3 = 0; i3 < plan.dims[3]; ++i3, ++idx) {
                    T bv = expand_read(B, i0, i1, i2, i3, plan.sb);
                    T av = expand_read(A, i0, i1, i2, i3, plan.sa);
                    c[idx] = -g[idx] * av / (bv * bv);
                  }
            t.acc_reduced(bid, c);
          }
          break;
        }
      }
    });
  }

  static void conv_forward(const Tensor<T>& X, const Tensor<T>& K, Tensor<T>& out,
                           i64 H, i64 W, i64 Cin, i64 kh, i64 kw, i64 Cout,
                           i64 Ho, i64 Wo, i64 stride, i64 pad) {
    for (i64 oi = 0; oi < Ho; ++oi) {
      for (i64 oj = 0; oj < Wo; ++oj) {
        T* o = out.data.data() + (oi * Wo + oj) * Cout;
        for (i64 di = 0; di < kh; ++di) {
          i64 ii = oi * stride + di - pad;
          if (ii < 0 || ii >= H) continue;
          for (i64 dj = 0; dj < kw; ++dj) {
            i64 jj = oj * stride + dj - pad;
            if (jj < 0 || jj >= W) continue;
            const T* xr = X.data.data() + (ii * W + jj) * Cin;
            const T* kr = K.data.data() + (di * kw + dj) * Cin * Cout;
            for (i64 ci = 0; ci < Cin; ++ci) {
              const T xv = xr[ci];
              if (xv == T(0)) continue;
              const T* kc = kr + ci * Cout;
              for (i64 co = 0; co < Cout; ++co) o[co] += xv * kc[co];
            }
          }
        }
      }
    }
  }

  std::vector<Node> nodes_;
  std::vector<i64> bindings_;
};

}  // namespace vamoe
