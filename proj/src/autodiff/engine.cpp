#include "topo/autodiff/engine.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Core>

namespace topo::ad {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C[m,n] (+)= op(A) * op(B); A is stored a_rows x a_cols, B b_rows x b_cols, row-major.
template <class T>
void gemm(const T* a, int a_rows, int a_cols, bool ta, const T* b, int b_rows, int b_cols, bool tb, T* c,
          bool accumulate) {
  Eigen::Map<const RowMat<T>> A(a, a_rows, a_cols);
  Eigen::Map<const RowMat<T>> B(b, b_rows, b_cols);
  const int m = ta ? a_cols : a_rows;
  const int n = tb ? b_rows : b_cols;
  Eigen::Map<RowMat<T>> C(c, m, n);
  if (!accumulate) C.setZero();
  if (!ta && !tb) C.noalias() += A * B;
  else if (ta && !tb) C.noalias() += A.transpose() * B;
  else if (!ta && tb) C.noalias() += A * B.transpose();
  else C.noalias() += A.transpose() * B.transpose();
}

struct ConvGeom {
  int n, cin, h, w, cout, k, stride, pad, ho, wo;
  int col_rows() const { return cin * k * k; }
  int col_cols() const { return ho * wo; }
};

template <class T>
ConvGeom conv_geometry(const BasicTensor<T>& x, const BasicTensor<T>& w, const Node& node) {
  if (x.rank() != 4) throw ShapeError("conv2d expects NCHW input, got " + shape_string(x.shape()));
  if (w.rank() != 4 || w.dim(2) != w.dim(3)) throw ShapeError("conv2d weight must be [Cout,Cin,k,k]");
  if (w.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d channel mismatch: input " + shape_string(x.shape()) + " weight " +
                     shape_string(w.shape()));
  }
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), node.stride, node.padding, 0, 0};
  g.ho = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.k) / g.stride + 1;
  if (g.ho <= 0 || g.wo <= 0) throw ShapeError("conv2d output would be empty");
  return g;
}

template <class T>
void im2col(const ConvGeom& g, const T* x, T* col) {
  const int plane = g.ho * g.wo;
  for (int ci = 0; ci < g.cin; ++ci) {
    const T* xc = x + static_cast<std::size_t>(ci) * g.h * g.w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        T* row = col + static_cast<std::size_t>((ci * g.k + ky) * g.k + kx) * plane;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          T* out = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(out, out + g.wo, T{0});
            continue;
          }
          const T* xr = xc + iy * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            out[ox] = (ix >= 0 && ix < g.w) ? xr[ix] : T{0};
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const ConvGeom& g, const T* col, T* dx) {
  const int plane = g.ho * g.wo;
  for (int ci = 0; ci < g.cin; ++ci) {
    T* xc = dx + static_cast<std::size_t>(ci) * g.h * g.w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const T* row = col + static_cast<std::size_t>((ci * g.k + ky) * g.k + kx) * plane;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          T* xr = xc + iy * g.w;
          const T* in = row + oy * g.wo;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) xr[ix] += in[ox];
          }
        }
      }
    }
  }
}

bool is_identity_patch(const ConvGeom& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

template <class T>
inline T sigmoid_of(T x) {
  if (x >= 0) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <class T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

template <class T>
void require_rank(const BasicTensor<T>& t, int rank, std::string_view op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(t.shape()));
  }
}

}  // namespace

template <class T>
double BasicEvaluation<T>::scalar(NodeId id) const {
  const BasicTensor<T>& v = value(id);
  if (v.size() != 1) throw ShapeError("scalar(): node is not scalar, shape " + shape_string(v.shape()));
  const auto& aux = aux_[id];
  const OpKind op = graph_->node(id).op;
  if ((op == OpKind::Sum || op == OpKind::Mse || op == OpKind::BceWithLogits) && !aux.empty()) return aux[0];
  return v[0];
}

template <class T>
const BasicTensor<T>& BasicEvaluation<T>::value(NodeId id) const {
  if (id < 0 || id >= static_cast<NodeId>(view_.size())) throw std::out_of_range("node id out of range");
  return *view_[id];
}

template <class T>
BasicEvaluation<T> evaluate(const Graph& graph, const BasicParameterStore<T>& params, const BasicTensorMap<T>& inputs,
                            const EvalOptions& options) {
  using Tensor = BasicTensor<T>;
  BasicEvaluation<T> ev;
  ev.graph_ = &graph;
  ev.params_ = &params;
  const int count = graph.size();
  ev.values_.resize(count);
  ev.view_.assign(count, nullptr);
  ev.aux_.resize(count);

  std::vector<T> col;
  for (NodeId id = 0; id < count; ++id) {
    const Node& node = graph.node(id);
    auto in = [&](int k) -> const Tensor& { return *ev.view_[node.inputs[k]]; };
    Tensor& out = ev.values_[id];
    switch (node.op) {
      case OpKind::Input: {
        auto it = inputs.find(node.name);
        if (it == inputs.end()) throw ShapeError("unbound graph input '" + node.name + "'");
        out = it->second;
        break;
      }
      case OpKind::Parameter:
        ev.view_[id] = &params.get(node.name);
        continue;
      case OpKind::Conv2d: {
        const Tensor& x = in(0);
        const Tensor& w = in(1);
        const Tensor* b = node.inputs.size() > 2 ? &in(2) : nullptr;
        const ConvGeom g = conv_geometry(x, w, node);
        if (b && (b->rank() != 1 || b->dim(0) != g.cout)) throw ShapeError("conv2d bias must be [Cout]");
        out = Tensor({g.n, g.cout, g.ho, g.wo});
        const std::size_t in_stride = static_cast<std::size_t>(g.cin) * g.h * g.w;
        const std::size_t out_stride = static_cast<std::size_t>(g.cout) * g.ho * g.wo;
        const bool direct = is_identity_patch(g);
        if (!direct) col.resize(static_cast<std::size_t>(g.col_rows()) * g.col_cols());
        for (int n = 0; n < g.n; ++n) {
          const T* xs = x.ptr() + n * in_stride;
          T* os = out.ptr() + n * out_stride;
          if (!direct) im2col(g, xs, col.data());
          const T* src = direct ? xs : col.data();
          if (b) {
            for (int co = 0; co < g.cout; ++co)
              std::fill(os + co * g.col_cols(), os + (co + 1) * g.col_cols(), (*b)[co]);
          }
          gemm(w.ptr(), g.cout, g.col_rows(), false, src, g.col_rows(), g.col_cols(), false, os, b != nullptr);
        }
        break;
      }
      case OpKind::Upsample2x: {
        const Tensor& x = in(0);
        require_rank(x, 4, "upsample2x");
        const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
        out = Tensor({n, c, 2 * h, 2 * w});
        for (int p = 0; p < n * c; ++p) {
          const T* src = x.ptr() + static_cast<std::size_t>(p) * h * w;
          T* dst = out.ptr() + static_cast<std::size_t>(p) * 4 * h * w;
          for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx) dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
        }
        break;
      }
      case OpKind::Concat: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        require_rank(a, 4, "concat");
        require_rank(b, 4, "concat");
        if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
          throw ShapeError("concat: incompatible shapes " + shape_string(a.shape()) + " and " +
                           shape_string(b.shape()));
        }
        const int n = a.dim(0);
        const std::size_t sa = a.size() / n, sb = b.size() / n;
        out = Tensor({n, a.dim(1) + b.dim(1), a.dim(2), a.dim(3)});
        for (int i = 0; i < n; ++i) {
          std::copy_n(a.ptr() + i * sa, sa, out.ptr() + i * (sa + sb));
          std::copy_n(b.ptr() + i * sb, sb, out.ptr() + i * (sa + sb) + sa);
        }
        break;
      }
      case OpKind::Dense: {
        const Tensor& x = in(0);
        const Tensor& w = in(1);
        const Tensor& b = in(2);
        require_rank(x, 2, "dense");
        require_rank(w, 2, "dense");
        if (w.dim(1) != x.dim(1) || b.rank() != 1 || b.dim(0) != w.dim(0)) {
          throw ShapeError("dense: shape mismatch x " + shape_string(x.shape()) + " w " + shape_string(w.shape()));
        }
        const int n = x.dim(0), o = w.dim(0);
        out = Tensor({n, o});
        for (int i = 0; i < n; ++i) std::copy_n(b.ptr(), o, out.ptr() + i * o);
        gemm(x.ptr(), n, x.dim(1), false, w.ptr(), o, w.dim(1), true, out.ptr(), true);
        break;
      }
      case OpKind::Silu: {
        const Tensor& x = in(0);
        out = Tensor(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * sigmoid_of(x[i]);
        break;
      }
      case OpKind::Sigmoid: {
        const Tensor& x = in(0);
        out = Tensor(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = sigmoid_of(x[i]);
        break;
      }
      case OpKind::GroupNorm: {
        const Tensor& x = in(0);
        const Tensor& gamma = in(1);
        const Tensor& beta = in(2);
        require_rank(x, 4, "group_norm");
        const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
        const int groups = node.groups;
        if (groups <= 0 || c % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
        if (gamma.size() != static_cast<std::size_t>(c) || beta.size() != static_cast<std::size_t>(c)) {
          throw ShapeError("group_norm: affine parameters must have C entries");
        }
        const int cpg = c / groups;
        const std::size_t gsize = static_cast<std::size_t>(cpg) * hw;
        out = Tensor(x.shape());
        auto& aux = ev.aux_[id];  // mean, rstd per (n, g)
        aux.assign(static_cast<std::size_t>(2) * n * groups, 0.0);
        for (int i = 0; i < n; ++i) {
          for (int gi = 0; gi < groups; ++gi) {
            const std::size_t off = (static_cast<std::size_t>(i) * c + gi * cpg) * hw;
            double s = 0.0, ss = 0.0;
            for (std::size_t k = 0; k < gsize; ++k) s += x[off + k];
            const double mean = s / gsize;
            for (std::size_t k = 0; k < gsize; ++k) {
              const double d = x[off + k] - mean;
              ss += d * d;
            }
            const double rstd = 1.0 / std::sqrt(ss / gsize + 1e-5);
            aux[2 * (i * groups + gi)] = mean;
            aux[2 * (i * groups + gi) + 1] = rstd;
            for (int cc = 0; cc < cpg; ++cc) {
              const int ch = gi * cpg + cc;
              const double ga = gamma[ch], be = beta[ch];
              for (int k = 0; k < hw; ++k) {
                const std::size_t idx = off + static_cast<std::size_t>(cc) * hw + k;
                out[idx] = static_cast<T>((x[idx] - mean) * rstd * ga + be);
              }
            }
          }
        }
        break;
      }
      case OpKind::GlobalAvgPool: {
        const Tensor& x = in(0);
        require_rank(x, 4, "global_avg_pool");
        const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
        out = Tensor({n, c});
        for (int p = 0; p < n * c; ++p) {
          double s = 0.0;
          for (int k = 0; k < hw; ++k) s += x[static_cast<std::size_t>(p) * hw + k];
          out[p] = static_cast<T>(s / hw);
        }
        break;
      }
      case OpKind::Add: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        require_same_shape(a, b, "add");
        out = a;
        for (std::size_t i = 0; i < a.size(); ++i) out[i] += b[i];
        break;
      }
      case OpKind::AddChannel:
      case OpKind::MulChannel: {
        const Tensor& x = in(0);
        const Tensor& b = in(1);
        const char* what = node.op == OpKind::AddChannel ? "add_channel" : "mul_channel";
        require_rank(x, 4, what);
        if (b.rank() != 2 || b.dim(0) != x.dim(0) || b.dim(1) != x.dim(1)) {
          throw ShapeError(std::string(what) + ": per-channel tensor " + shape_string(b.shape()) + " does not match " +
                           shape_string(x.shape()));
        }
        const int hw = x.dim(2) * x.dim(3);
        out = x;
        if (node.op == OpKind::AddChannel) {
          for (std::size_t p = 0; p < b.size(); ++p)
            for (int k = 0; k < hw; ++k) out[p * hw + k] += b[p];
        } else {
          for (std::size_t p = 0; p < b.size(); ++p)
            for (int k = 0; k < hw; ++k) out[p * hw + k] *= b[p];
        }
        break;
      }
      case OpKind::Mul: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        require_same_shape(a, b, "mul");
        out = a;
        for (std::size_t i = 0; i < a.size(); ++i) out[i] *= b[i];
        break;
      }
      case OpKind::Scale: {
        out = in(0);
        for (auto& v : out.values()) v *= node.scalar;
        break;
      }
      case OpKind::Sum: {
        double s = 0.0;
        for (T v : in(0).values()) s += v;
        ev.aux_[id] = {s};
        out = Tensor({1}, static_cast<T>(s));
        break;
      }
      case OpKind::BceWithLogits: {
        const Tensor& z = in(0);
        const Tensor& y = in(1);
        require_same_shape(z, y, "bce_with_logits");
        double s = 0.0;
        for (std::size_t i = 0; i < z.size(); ++i) {
          const double zi = z[i];
          s += std::max(zi, 0.0) - zi * y[i] + std::log1p(std::exp(-std::fabs(zi)));
        }
        s /= static_cast<double>(std::max<std::size_t>(z.size(), 1));
        ev.aux_[id] = {s};
        out = Tensor({1}, static_cast<T>(s));
        break;
      }
      case OpKind::Mse: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        require_same_shape(a, b, "mse");
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
          const double d = static_cast<double>(a[i]) - b[i];
          s += d * d;
        }
        s /= static_cast<double>(std::max<std::size_t>(a.size(), 1));
        ev.aux_[id] = {s};
        out = Tensor({1}, static_cast<T>(s));
        break;
      }
    }
    ev.view_[id] = &ev.values_[id];
    if (options.check_finite && !out.all_finite()) {
      throw NonFiniteError("non-finite value produced by node " + std::to_string(id) + " (" +
                           std::string(op_name(node.op)) + ")");
    }
  }
  return ev;
}

template <class T>
class Backprop {
 public:
  using Tensor = BasicTensor<T>;

  static BasicGradients<T> run(const BasicEvaluation<T>& ev, NodeId output, const Tensor& seed,
                               const BackwardOptions& opt) {
    const Graph& graph = ev.graph();
    const int count = graph.size();
    if (output < 0 || output >= count) throw std::out_of_range("backward: output id out of range");
    require_same_shape(ev.value(output), seed, "backward seed");

    // Nodes whose gradient is needed: requested inputs, parameters (optionally), and anything
    // downstream of them.
    std::vector<char> needs(count, 0);
    for (const auto& name : opt.inputs) {
      const NodeId id = graph.find_input(name);
      if (id < 0) throw std::invalid_argument("backward: unknown input '" + name + "'");
      for (const auto& n : graph.nodes()) {
        if (n.op == OpKind::BceWithLogits && n.inputs[1] == id) {
          throw std::invalid_argument("input '" + name + "' is a label and is not differentiable");
        }
      }
      needs[id] = 1;
    }
    for (NodeId id = 0; id < count; ++id) {
      const Node& n = graph.node(id);
      if (n.op == OpKind::Parameter) needs[id] = opt.parameters ? 1 : 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        if (n.op == OpKind::BceWithLogits && k == 1) continue;
        if (needs[n.inputs[k]]) needs[id] = 1;
      }
    }
    // Restrict to ancestors of the output.
    std::vector<char> live(count, 0);
    live[output] = 1;
    for (NodeId id = output; id >= 0; --id) {
      if (!live[id]) continue;
      for (NodeId in : graph.node(id).inputs) live[in] = 1;
    }

    std::vector<Tensor> grad(count);
    grad[output] = seed;
    std::vector<T> col, dcol;

    auto acc = [&](NodeId target) -> Tensor* {
      if (!needs[target]) return nullptr;
      if (grad[target].empty() && !ev.value(target).empty()) grad[target] = Tensor(ev.value(target).shape());
      return &grad[target];
    };

    for (NodeId id = output; id >= 0; --id) {
      if (!live[id] || !needs[id] || grad[id].empty()) continue;
      const Node& node = graph.node(id);
      const Tensor& g = grad[id];
      auto val = [&](int k) -> const Tensor& { return ev.value(node.inputs[k]); };
      switch (node.op) {
        case OpKind::Input:
        case OpKind::Parameter:
          break;
        case OpKind::Conv2d: {
          const Tensor& x = val(0);
          const Tensor& w = val(1);
          const ConvGeom geo = conv_geometry(x, w, node);
          Tensor* dx = acc(node.inputs[0]);
          Tensor* dw = acc(node.inputs[1]);
          Tensor* db = node.inputs.size() > 2 ? acc(node.inputs[2]) : nullptr;
          const std::size_t in_stride = static_cast<std::size_t>(geo.cin) * geo.h * geo.w;
          const std::size_t out_stride = static_cast<std::size_t>(geo.cout) * geo.ho * geo.wo;
          const bool direct = is_identity_patch(geo);
          const std::size_t col_size = static_cast<std::size_t>(geo.col_rows()) * geo.col_cols();
          if (!direct) col.resize(col_size);
          dcol.resize(col_size);
          for (int n = 0; n < geo.n; ++n) {
            const T* gs = g.ptr() + n * out_stride;
            if (db) {
              for (int co = 0; co < geo.cout; ++co) {
                double s = 0.0;
                for (int k = 0; k < geo.col_cols(); ++k) s += gs[co * geo.col_cols() + k];
                (*db)[co] += static_cast<T>(s);
              }
            }
            if (dw) {
              const T* xs = x.ptr() + n * in_stride;
              if (!direct) im2col(geo, xs, col.data());
              const T* src = direct ? xs : col.data();
              gemm(gs, geo.cout, geo.col_cols(), false, src, geo.col_rows(), geo.col_cols(), true, dw->ptr(), true);
            }
            if (dx) {
              if (direct) {
                gemm(w.ptr(), geo.cout, geo.col_rows(), true, gs, geo.cout, geo.col_cols(), false,
                     dx->ptr() + n * in_stride, true);
              } else {
                gemm(w.ptr(), geo.cout, geo.col_rows(), true, gs, geo.cout, geo.col_cols(), false, dcol.data(), false);
                col2im(geo, dcol.data(), dx->ptr() + n * in_stride);
              }
            }
          }
          break;
        }
        case OpKind::Upsample2x: {
          if (Tensor* dx = acc(node.inputs[0])) {
            const Tensor& x = val(0);
            const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
            for (int p = 0; p < n * c; ++p) {
              const T* src = g.ptr() + static_cast<std::size_t>(p) * 4 * h * w;
              T* dst = dx->ptr() + static_cast<std::size_t>(p) * h * w;
              for (int y = 0; y < 2 * h; ++y)
                for (int xx = 0; xx < 2 * w; ++xx) dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
            }
          }
          break;
        }
        case OpKind::Concat: {
          const Tensor& a = val(0);
          const Tensor& b = val(1);
          const int n = a.dim(0);
          const std::size_t sa = a.size() / n, sb = b.size() / n;
          Tensor* da = acc(node.inputs[0]);
          Tensor* dbt = acc(node.inputs[1]);
          for (int i = 0; i < n; ++i) {
            const T* src = g.ptr() + i * (sa + sb);
            if (da)
              for (std::size_t k = 0; k < sa; ++k) (*da)[i * sa + k] += src[k];
            if (dbt)
              for (std::size_t k = 0; k < sb; ++k) (*dbt)[i * sb + k] += src[sa + k];
          }
          break;
        }
        case OpKind::Dense: {
          const Tensor& x = val(0);
          const Tensor& w = val(1);
          const int n = x.dim(0), i_dim = x.dim(1), o = w.dim(0);
          if (Tensor* dx = acc(node.inputs[0])) gemm(g.ptr(), n, o, false, w.ptr(), o, i_dim, false, dx->ptr(), true);
          if (Tensor* dw = acc(node.inputs[1])) gemm(g.ptr(), n, o, true, x.ptr(), n, i_dim, false, dw->ptr(), true);
          if (Tensor* db = acc(node.inputs[2])) {
            for (int r = 0; r < n; ++r)
              for (int k = 0; k < o; ++k) (*db)[k] += g[static_cast<std::size_t>(r) * o + k];
          }
          break;
        }
        case OpKind::Silu: {
          if (Tensor* dx = acc(node.inputs[0])) {
            const Tensor& x = val(0);
            for (std::size_t i = 0; i < x.size(); ++i) {
              const T s = sigmoid_of(x[i]);
              (*dx)[i] += g[i] * s * (T{1} + x[i] * (T{1} - s));
            }
          }
          break;
        }
        case OpKind::Sigmoid: {
          if (Tensor* dx = acc(node.inputs[0])) {
            const Tensor& y = ev.value(id);
            for (std::size_t i = 0; i < y.size(); ++i) (*dx)[i] += g[i] * y[i] * (T{1} - y[i]);
          }
          break;
        }
        case OpKind::GroupNorm: {
          const Tensor& x = val(0);
          const Tensor& gamma = val(1);
          const auto& aux = ev.aux(id);
          const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
          const int groups = node.groups, cpg = c / groups;
          const std::size_t gsize = static_cast<std::size_t>(cpg) * hw;
          Tensor* dx = acc(node.inputs[0]);
          Tensor* dgamma = acc(node.inputs[1]);
          Tensor* dbeta = acc(node.inputs[2]);
          std::vector<double> dgam(c, 0.0), dbet(c, 0.0);
          for (int i = 0; i < n; ++i) {
            for (int gi = 0; gi < groups; ++gi) {
              const double mean = aux[2 * (i * groups + gi)];
              const double rstd = aux[2 * (i * groups + gi) + 1];
              const std::size_t off = (static_cast<std::size_t>(i) * c + gi * cpg) * hw;
              double sum_dxh = 0.0, sum_dxh_xh = 0.0;
              for (int cc = 0; cc < cpg; ++cc) {
                const int ch = gi * cpg + cc;
                for (int k = 0; k < hw; ++k) {
                  const std::size_t idx = off + static_cast<std::size_t>(cc) * hw + k;
                  const double xh = (x[idx] - mean) * rstd;
                  const double gg = g[idx];
                  dgam[ch] += gg * xh;
                  dbet[ch] += gg;
                  const double dxh = gg * gamma[ch];
                  sum_dxh += dxh;
                  sum_dxh_xh += dxh * xh;
                }
              }
              if (!dx) continue;
              const double inv_m = 1.0 / static_cast<double>(gsize);
              for (int cc = 0; cc < cpg; ++cc) {
                const int ch = gi * cpg + cc;
                for (int k = 0; k < hw; ++k) {
                  const std::size_t idx = off + static_cast<std::size_t>(cc) * hw + k;
                  const double xh = (x[idx] - mean) * rstd;
                  const double dxh = g[idx] * static_cast<double>(gamma[ch]);
                  (*dx)[idx] += static_cast<T>(rstd * (dxh - inv_m * sum_dxh - xh * inv_m * sum_dxh_xh));
                }
              }
            }
          }
          if (dgamma)
            for (int ch = 0; ch < c; ++ch) (*dgamma)[ch] += static_cast<T>(dgam[ch]);
          if (dbeta)
            for (int ch = 0; ch < c; ++ch) (*dbeta)[ch] += static_cast<T>(dbet[ch]);
          break;
        }
        case OpKind::GlobalAvgPool: {
          if (Tensor* dx = acc(node.inputs[0])) {
            const Tensor& x = val(0);
            const int hw = x.dim(2) * x.dim(3);
            for (std::size_t p = 0; p < g.size(); ++p) {
              const T v = g[p] / static_cast<T>(hw);
              for (int k = 0; k < hw; ++k) (*dx)[p * hw + k] += v;
            }
          }
          break;
        }
        case OpKind::Add: {
          for (int k = 0; k < 2; ++k)
            if (Tensor* d = acc(node.inputs[k]))
              for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
          break;
        }
        case OpKind::AddChannel: {
          const int hw = val(0).dim(2) * val(0).dim(3);
          if (Tensor* dx = acc(node.inputs[0]))
            for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i];
          if (Tensor* db = acc(node.inputs[1])) {
            for (std::size_t p = 0; p < db->size(); ++p) {
              double s = 0.0;
              for (int k = 0; k < hw; ++k) s += g[p * hw + k];
              (*db)[p] += static_cast<T>(s);
            }
          }
          break;
        }
        case OpKind::MulChannel: {
          const Tensor& x = val(0);
          const Tensor& b = val(1);
          const int hw = x.dim(2) * x.dim(3);
          if (Tensor* dx = acc(node.inputs[0]))
            for (std::size_t p = 0; p < b.size(); ++p)
              for (int k = 0; k < hw; ++k) (*dx)[p * hw + k] += g[p * hw + k] * b[p];
          if (Tensor* db = acc(node.inputs[1])) {
            for (std::size_t p = 0; p < db->size(); ++p) {
              double s = 0.0;
              for (int k = 0; k < hw; ++k) s += static_cast<double>(g[p * hw + k]) * x[p * hw + k];
              (*db)[p] += static_cast<T>(s);
            }
          }
          break;
        }
        case OpKind::Mul: {
          const Tensor& a = val(0);
          const Tensor& b = val(1);
          if (Tensor* da = acc(node.inputs[0]))
            for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * b[i];
          if (Tensor* db = acc(node.inputs[1]))
            for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i] * a[i];
          break;
        }
        case OpKind::Scale: {
          if (Tensor* dx = acc(node.inputs[0]))
            for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i] * node.scalar;
          break;
        }
        case OpKind::Sum: {
          if (Tensor* dx = acc(node.inputs[0]))
            for (auto& v : dx->values()) v += g[0];
          break;
        }
        case OpKind::BceWithLogits: {
          if (Tensor* dz = acc(node.inputs[0])) {
            const Tensor& z = val(0);
            const Tensor& y = val(1);
            const T scale = g[0] / static_cast<T>(z.size());
            for (std::size_t i = 0; i < z.size(); ++i) (*dz)[i] += scale * (sigmoid_of(z[i]) - y[i]);
          }
          break;
        }
        case OpKind::Mse: {
          const Tensor& a = val(0);
          const Tensor& b = val(1);
          const double scale = 2.0 * g[0] / static_cast<double>(a.size());
          Tensor* da = acc(node.inputs[0]);
          Tensor* db = acc(node.inputs[1]);
          for (std::size_t i = 0; i < a.size(); ++i) {
            const T d = static_cast<T>(scale * (static_cast<double>(a[i]) - b[i]));
            if (da) (*da)[i] += d;
            if (db) (*db)[i] -= d;
          }
          break;
        }
      }
    }

    BasicGradients<T> out;
    for (NodeId id = 0; id < count; ++id) {
      const Node& n = graph.node(id);
      if (n.op == OpKind::Parameter && opt.parameters) {
        Tensor g = grad[id].empty() ? Tensor(ev.value(id).shape()) : std::move(grad[id]);
        auto it = out.parameters.find(n.name);
        if (it == out.parameters.end()) {
          out.parameters.emplace(n.name, std::move(g));
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
        }
      }
    }
    for (const auto& name : opt.inputs) {
      const NodeId id = graph.find_input(name);
      out.inputs.emplace(name, grad[id].empty() ? Tensor(ev.value(id).shape()) : std::move(grad[id]));
    }
    return out;
  }
};

template <class T>
BasicGradients<T> backward(const BasicEvaluation<T>& eval, NodeId output, const BasicTensor<T>& seed,
                           const BackwardOptions& options) {
  return Backprop<T>::run(eval, output, seed, options);
}

template <class T>
BasicGradients<T> gradients(const BasicEvaluation<T>& eval, NodeId loss, const BackwardOptions& options) {
  const BasicTensor<T>& v = eval.value(loss);
  if (v.size() != 1) throw ShapeError("gradients: loss node is not scalar, shape " + shape_string(v.shape()));
  return Backprop<T>::run(eval, loss, BasicTensor<T>(v.shape(), T{1}), options);
}

template class BasicEvaluation<float>;
template class BasicEvaluation<double>;
template Evaluation evaluate<float>(const Graph&, const ParameterStore&, const TensorMap&, const EvalOptions&);
template EvaluationD evaluate<double>(const Graph&, const BasicParameterStore<double>&, const TensorMapD&,
                                      const EvalOptions&);
template Gradients gradients<float>(const Evaluation&, NodeId, const BackwardOptions&);
template GradientsD gradients<double>(const EvaluationD&, NodeId, const BackwardOptions&);
template Gradients backward<float>(const Evaluation&, NodeId, const Tensor&, const BackwardOptions&);
template GradientsD backward<double>(const EvaluationD&, NodeId, const TensorD&, const BackwardOptions&);

}  // namespace topo::ad
