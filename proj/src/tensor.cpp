#include "depthc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "depthc/rng.hpp"

namespace depthc {

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d < 1) {
            throw DimensionError("shape " + shape_str(shape) + " has a dimension < 1");
        }
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor::Tensor(Shape shape, double fill, bool requires_grad) {
    int64_t n = shape_numel(shape);
    block_ = std::make_shared<Block>();
    block_->shape = std::move(shape);
    block_->values.assign(static_cast<size_t>(n), fill);
    block_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
    int64_t n = shape_numel(shape);
    if (n != static_cast<int64_t>(values.size())) {
        throw DimensionError("data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
    }
    block_ = std::make_shared<Block>();
    block_->shape = std::move(shape);
    block_->values = std::move(values);
    block_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return Tensor(Shape{1}, std::vector<double>{v}, requires_grad);
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, std::mt19937_64& rng,
                       bool requires_grad) {
    int64_t n = shape_numel(shape);
    std::vector<double> v(static_cast<size_t>(n));
    for (auto& x : v) x = rng_range(rng, lo, hi);
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

const Shape& Tensor::shape() const {
    if (!block_) throw ContractError("use of an undefined tensor");
    return block_->shape;
}

int Tensor::dim(int i) const {
    const Shape& s = shape();
    if (i < 0 || i >= static_cast<int>(s.size())) {
        throw DimensionError("dim index " + std::to_string(i) + " out of range for shape " +
                             shape_str(s));
    }
    return s[static_cast<size_t>(i)];
}

int64_t Tensor::size() const { return static_cast<int64_t>(data().size()); }

const std::vector<double>& Tensor::data() const {
    if (!block_) throw ContractError("use of an undefined tensor");
    return block_->values;
}

std::vector<double>& Tensor::mutable_data() {
    if (!block_) throw ContractError("use of an undefined tensor");
    return block_->values;
}

double Tensor::value() const {
    if (size() != 1) {
        throw ContractError("value() on tensor of shape " + shape_str(shape()));
    }
    return data()[0];
}

bool Tensor::requires_grad() const { return block_ && block_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
    if (!block_) throw ContractError("use of an undefined tensor");
    block_->requires_grad = v;
    return *this;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("max_abs_diff: shapes " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    double m = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// ---------------------------------------------------------------------------
// GradientStore

bool GradientStore::has(const Tensor& t) const { return grads_.count(t.id()) > 0; }

const std::vector<double>& GradientStore::grad(const Tensor& t) const {
    auto it = grads_.find(t.id());
    if (it == grads_.end()) {
        throw LookupError("no gradient recorded for tensor of shape " + shape_str(t.shape()));
    }
    return it->second.values;
}

Tensor GradientStore::grad_tensor(const Tensor& t) const {
    auto it = grads_.find(t.id());
    if (it == grads_.end()) {
        throw LookupError("no gradient recorded for tensor of shape " + shape_str(t.shape()));
    }
    return Tensor(it->second.shape, it->second.values);
}

// ---------------------------------------------------------------------------
// Tape plumbing

std::vector<double>& Tape::BackwardPass::buf(int node) {
    auto& b = bufs_[static_cast<size_t>(node)];
    if (b.empty()) {
        b.assign(tape_.nodes_[static_cast<size_t>(node)].out.data().size(), 0.0);
    }
    return b;
}

bool Tape::BackwardPass::needed(int node) const {
    const auto& n = tape_.nodes_[static_cast<size_t>(node)];
    return n.grad_needed || n.requires_grad;
}

int Tape::node_of(const Tensor& t) const {
    auto it = index_.find(t.id());
    return it == index_.end() ? -1 : it->second;
}

int Tape::ensure_leaf(const Tensor& t) {
    int id = node_of(t);
    if (id >= 0) return id;
    Node n;
    n.out = t;
    n.requires_grad = t.requires_grad();
    n.grad_needed = false;
    nodes_.push_back(std::move(n));
    id = static_cast<int>(nodes_.size()) - 1;
    index_.emplace(t.id(), id);
    return id;
}

int Tape::watch(const Tensor& t) {
    if (!recording_) throw ContractError("watch() on a non-recording tape");
    return ensure_leaf(t);
}

Tensor Tape::result(Shape shape, std::vector<double> values, std::vector<int> parents,
                    BackFn back) {
    return result(Tensor(std::move(shape), std::move(values)), std::move(parents),
                  std::move(back));
}

Tensor Tape::result(Tensor out, std::vector<int> parents, BackFn back) {
    if (!recording_) return out;
    Node n;
    n.out = out;
    n.requires_grad = false;
    n.grad_needed = false;
    for (int p : parents) {
        const auto& pn = nodes_[static_cast<size_t>(p)];
        n.grad_needed = n.grad_needed || pn.grad_needed || pn.requires_grad;
    }
    n.parents = std::move(parents);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    index_.emplace(out.id(), static_cast<int>(nodes_.size()) - 1);
    return out;
}

GradientStore Tape::backward(const Tensor& loss) {
    if (!recording_) throw ContractError("backward() on a non-recording tape");
    if (loss.size() != 1) {
        throw ContractError("backward: loss must be a scalar, got shape " +
                            shape_str(loss.shape()));
    }
    int lid = ensure_leaf(loss);

    BackwardPass bp(*this, nodes_.size());
    bp.buf(lid)[0] = 1.0;
    for (int i = lid; i >= 0; --i) {
        const Node& n = nodes_[static_cast<size_t>(i)];
        if (!n.back || !n.grad_needed || !bp.has(i)) continue;
        n.back(bp.buf(i), bp);
    }

    GradientStore store;
    for (size_t i = 0; i < nodes_.size(); ++i) {
        const Node& n = nodes_[i];
        if (!n.requires_grad) continue;
        GradientStore::Entry e;
        e.ref = n.out;  // pins the block so the key stays unique
        e.shape = n.out.shape();
        if (bp.has(static_cast<int>(i))) {
            e.values = bp.buf(static_cast<int>(i));
        } else {
            e.values.assign(n.out.data().size(), 0.0);
        }
        store.grads_[n.out.id()] = std::move(e);
    }
    return store;
}

// ---------------------------------------------------------------------------
// Ops

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        for (int t = 0; t < k; ++t) {
            const double av = ad[static_cast<int64_t>(i) * k + t];
            const double* brow = bd + static_cast<int64_t>(t) * n;
            double* orow = out.data() + static_cast<int64_t>(i) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    int pa = -1, pb = -1;
    if (recording_) {
        pa = ensure_leaf(a);
        pb = ensure_leaf(b);
    }
    Tensor acap = a, bcap = b;
    return result(
        {m, n}, std::move(out), {pa, pb},
        [=](const std::vector<double>& g, BackwardPass& bp) {
            const double* adata = acap.data().data();
            const double* bdata = bcap.data().data();
            if (bp.needed(pa)) {
                auto& ga = bp.buf(pa);
                for (int i = 0; i < m; ++i)
                    for (int t = 0; t < k; ++t) {
                        double acc = 0.0;
                        const double* brow = bdata + static_cast<int64_t>(t) * n;
                        const double* grow = g.data() + static_cast<int64_t>(i) * n;
                        for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        ga[static_cast<size_t>(i) * k + t] += acc;
                    }
            }
            if (bp.needed(pb)) {
                auto& gb = bp.buf(pb);
                for (int i = 0; i < m; ++i) {
                    const double* grow = g.data() + static_cast<int64_t>(i) * n;
                    for (int t = 0; t < k; ++t) {
                        const double av = adata[static_cast<size_t>(i) * k + t];
                        if (av == 0.0) continue;
                        double* gbrow = gb.data() + static_cast<int64_t>(t) * n;
                        for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                    }
                }
            }
        });
}

Tensor Tape::conv2d(const Tensor& x, const Tensor& w, const std::optional<Tensor>& bias,
                    int stride, int padding) {
    if (x.rank() != 3 || w.rank() != 4) {
        throw DimensionError("conv2d: expected input [Cin,H,W] and kernel [Cout,Cin,kh,kw], got " +
                             shape_str(x.shape()) + " and " + shape_str(w.shape()));
    }
    const int cin = x.dim(0), h = x.dim(1), win = x.dim(2);
    const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != cin) {
        throw DimensionError("conv2d: kernel expects " + std::to_string(w.dim(1)) +
                             " input channels, input has " + std::to_string(cin));
    }
    if (kh < 1 || kw < 1) throw ConfigError("conv2d: kernel dims must be >= 1");
    if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
    if (padding < 0) throw ConfigError("conv2d: padding must be >= 0");
    const int hnum = h + 2 * padding - kh;
    const int wnum = win + 2 * padding - kw;
    if (hnum < 0 || wnum < 0) {
        throw DimensionError("conv2d: non-positive output size for input " +
                             shape_str(x.shape()) + " kernel " + shape_str(w.shape()) +
                             " stride " + std::to_string(stride) + " padding " +
                             std::to_string(padding));
    }
    const int ho = hnum / stride + 1;
    const int wo = wnum / stride + 1;
    if (bias && (bias->rank() != 1 || bias->dim(0) != cout)) {
        throw DimensionError("conv2d: bias shape " + shape_str(bias->shape()) +
                             " does not match " + std::to_string(cout) + " output channels");
    }

    // valid ox range for a tap: 0 <= ox*stride - padding + kx < win
    auto ox_range = [&](int kx, int& lo, int& hi) {
        lo = std::max(0, (padding - kx + stride - 1) / stride);
        const int num = win - 1 - kx + padding;
        hi = num < 0 ? 0 : std::min(wo, num / stride + 1);
    };

    const double* xd = x.data().data();
    const double* wd = w.data().data();
    std::vector<double> out(static_cast<size_t>(cout) * ho * wo, 0.0);
    for (int co = 0; co < cout; ++co) {
        double* oplane = out.data() + static_cast<int64_t>(co) * ho * wo;
        if (bias) {
            const double bv = bias->data()[static_cast<size_t>(co)];
            for (int64_t i = 0; i < static_cast<int64_t>(ho) * wo; ++i) oplane[i] = bv;
        }
        for (int ci = 0; ci < cin; ++ci) {
            const double* xplane = xd + static_cast<int64_t>(ci) * h * win;
            const double* wtap = wd + (static_cast<int64_t>(co) * cin + ci) * kh * kw;
            for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx) {
                    const double wv = wtap[ky * kw + kx];
                    if (wv == 0.0) continue;
                    int lo, hi;
                    ox_range(kx, lo, hi);
                    for (int oy = 0; oy < ho; ++oy) {
                        const int iy = oy * stride - padding + ky;
                        if (iy < 0 || iy >= h) continue;
                        const double* xrow =
                            xplane + static_cast<int64_t>(iy) * win - padding + kx;
                        double* orow = oplane + static_cast<int64_t>(oy) * wo;
                        if (stride == 1) {
                            for (int ox = lo; ox < hi; ++ox) orow[ox] += wv * xrow[ox];
                        } else {
                            for (int ox = lo; ox < hi; ++ox) {
                                orow[ox] += wv * xrow[static_cast<int64_t>(ox) * stride];
                            }
                        }
                    }
                }
            }
        }
    }

    int px = -1, pw = -1, pb = -1;
    if (recording_) {
        px = ensure_leaf(x);
        pw = ensure_leaf(w);
        if (bias) pb = ensure_leaf(*bias);
    }
    Tensor xcap = x, wcap = w;
    const bool has_bias = bias.has_value();
    return result(
        {cout, ho, wo}, std::move(out), has_bias ? std::vector<int>{px, pw, pb}
                                                 : std::vector<int>{px, pw},
        [=](const std::vector<double>& g, BackwardPass& bp) {
            const bool need_x = bp.needed(px);
            const bool need_w = bp.needed(pw);
            const bool need_b = has_bias && bp.needed(pb);
            const auto& xdata = xcap.data();
            const auto& wdata = wcap.data();
            auto range = [&](int kx, int& lo, int& hi) {
                lo = std::max(0, (padding - kx + stride - 1) / stride);
                const int num = win - 1 - kx + padding;
                hi = num < 0 ? 0 : std::min(wo, num / stride + 1);
            };
            if (need_b) {
                auto& gb = bp.buf(pb);
                for (int co = 0; co < cout; ++co) {
                    const double* gplane = g.data() + static_cast<int64_t>(co) * ho * wo;
                    double acc = 0.0;
                    for (int64_t i = 0; i < static_cast<int64_t>(ho) * wo; ++i) acc += gplane[i];
                    gb[static_cast<size_t>(co)] += acc;
                }
            }
            if (!need_x && !need_w) return;
            std::vector<double>* gx = need_x ? &bp.buf(px) : nullptr;
            std::vector<double>* gw = need_w ? &bp.buf(pw) : nullptr;
            for (int co = 0; co < cout; ++co) {
                const double* gplane = g.data() + static_cast<int64_t>(co) * ho * wo;
                for (int ci = 0; ci < cin; ++ci) {
                    const double* xplane = xdata.data() + static_cast<int64_t>(ci) * h * win;
                    const int64_t woff = (static_cast<int64_t>(co) * cin + ci) * kh * kw;
                    for (int ky = 0; ky < kh; ++ky) {
                        for (int kx = 0; kx < kw; ++kx) {
                            int lo, hi;
                            range(kx, lo, hi);
                            const double wv = wdata[static_cast<size_t>(woff) + ky * kw + kx];
                            double wacc = 0.0;
                            for (int oy = 0; oy < ho; ++oy) {
                                const int iy = oy * stride - padding + ky;
                                if (iy < 0 || iy >= h) continue;
                                const double* grow = gplane + static_cast<int64_t>(oy) * wo;
                                const int64_t xbase =
                                    static_cast<int64_t>(iy) * win - padding + kx;
                                if (gx) {
                                    double* gxrow = gx->data() +
                                                    static_cast<int64_t>(ci) * h * win + xbase;
                                    if (stride == 1) {
                                        for (int ox = lo; ox < hi; ++ox)
                                            gxrow[ox] += wv * grow[ox];
                                    } else {
                                        for (int ox = lo; ox < hi; ++ox)
                                            gxrow[static_cast<int64_t>(ox) * stride] +=
                                                wv * grow[ox];
                                    }
                                }
                                if (gw) {
                                    const double* xrow = xplane + xbase;
                                    if (stride == 1) {
                                        for (int ox = lo; ox < hi; ++ox)
                                            wacc += grow[ox] * xrow[ox];
                                    } else {
                                        for (int ox = lo; ox < hi; ++ox)
                                            wacc += grow[ox] *
                                                    xrow[static_cast<int64_t>(ox) * stride];
                                    }
                                }
                            }
                            if (gw) (*gw)[static_cast<size_t>(woff) + ky * kw + kx] += wacc;
                        }
                    }
                }
            }
        });
}

Tensor Tape::softmax_rows(const Tensor& x) {
    if (x.rank() != 2) {
        throw DimensionError("softmax_rows: expected rank-2 input, got " + shape_str(x.shape()));
    }
    const int r = x.dim(0), c = x.dim(1);
    const auto& xd = x.data();
    for (double v : xd) {
        if (std::isnan(v)) throw NumericError("softmax_rows: NaN in input");
    }
    std::vector<double> out(xd.size());
    for (int i = 0; i < r; ++i) {
        const double* row = xd.data() + static_cast<int64_t>(i) * c;
        double* orow = out.data() + static_cast<int64_t>(i) * c;
        double mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (int j = 0; j < c; ++j) {
            orow[j] = std::exp(row[j] - mx);
            s += orow[j];
        }
        for (int j = 0; j < c; ++j) orow[j] /= s;
    }
    int px = recording_ ? ensure_leaf(x) : -1;
    Tensor ycap({r, c}, std::move(out));
    return result(ycap, {px},
                  [=](const std::vector<double>& g, BackwardPass& bp) {
                      if (!bp.needed(px)) return;
                      auto& gx = bp.buf(px);
                      for (int i = 0; i < r; ++i) {
                          const double* yrow = ycap.data().data() + static_cast<int64_t>(i) * c;
                          const double* grow = g.data() + static_cast<int64_t>(i) * c;
                          double dot = 0.0;
                          for (int j = 0; j < c; ++j) dot += grow[j] * yrow[j];
                          double* gxrow = gx.data() + static_cast<int64_t>(i) * c;
                          for (int j = 0; j < c; ++j) gxrow[j] += yrow[j] * (grow[j] - dot);
                      }
                  });
}

Tensor Tape::relu(const Tensor& x) {
    const auto& xd = x.data();
    std::vector<double> out(xd.size());
    for (size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] > 0.0 ? xd[i] : 0.0;
    int px = recording_ ? ensure_leaf(x) : -1;
    Tensor xcap = x;
    return result(x.shape(), std::move(out), {px},
                  [=](const std::vector<double>& g, BackwardPass& bp) {
                      if (!bp.needed(px)) return;
                      auto& gx = bp.buf(px);
                      const auto& xv = xcap.data();
                      // subgradient at exactly 0 is 0
                      for (size_t i = 0; i < g.size(); ++i)
                          if (xv[i] > 0.0) gx[i] += g[i];
                  });
}

Tensor Tape::sigmoid(const Tensor& x) {
    const auto& xd = x.data();
    std::vector<double> out(xd.size());
    for (size_t i = 0; i < xd.size(); ++i) {
        const double v = xd[i];
        if (v >= 0.0) {
            out[i] = 1.0 / (1.0 + std::exp(-v));
        } else {
            const double e = std::exp(v);
            out[i] = e / (1.0 + e);
        }
    }
    int px = recording_ ? ensure_leaf(x) : -1;
    Tensor ycap(x.shape(), std::move(out));
    return result(ycap, {px},
                  [=](const std::vector<double>& g, BackwardPass& bp) {
                      if (!bp.needed(px)) return;
                      auto& gx = bp.buf(px);
                      const auto& yv = ycap.data();
                      for (size_t i = 0; i < g.size(); ++i)
                          gx[i] += g[i] * yv[i] * (1.0 - yv[i]);
                  });
}

namespace {
void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shapes differ: " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
}
}  // namespace

Tensor Tape::add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    const auto& ad = a.data();
    const auto& bd = b.data();
    std::vector<double> out(ad.size());
    for (size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] + bd[i];
    int pa = -1, pb = -1;
    if (recording_) {
        pa = ensure_leaf(a);
        pb = ensure_leaf(b);
    }
    return result(a.shape(), std::move(out), {pa, pb},
                  [=](const std::vector<double>& g, BackwardPass& bp) {
                      if (bp.needed(pa)) {
                          auto& ga = bp.buf(pa);
                          for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                      }
                      if (bp.needed(pb)) {
                          auto& gb = bp.buf(pb);
                          for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                      }
                  });
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    const auto& ad = a.data();
    const auto& bd = b.data();
    std::vector<double> out(ad.size());
    for (size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] - bd[i];
    int pa = -1, pb = -1;
    if (recording_) {
        pa = ensure_leaf(a);
        pb = ensure_leaf(b);
    }
    return result(a.shape(), std::move(out), {pa, pb},
                  [=](const std::vector<double>& g, BackwardPass& bp) {
                      if (bp.needed(pa)) {
                          auto& ga = bp.buf(pa);
                          for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                      }
                      if (bp.needed(pb)) {
                          auto& gb = bp.buf(pb);
                          for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                      }
                  });
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    const auto& ad = a.data();
    const auto& bd = b.data();
    std::vector<double> out(ad.size());
    for (size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * bd[i];
    int pa = -1, pb = -1;
    if (recording_) {
        pa = ensure_leaf(a);
        pb = ensure_leaf(b);
    }
    Tensor acap = a, bcap = b;
    return result(a.shape(), std::move(out), {pa, pb},
                  [=](const std::vector<double>& g, BackwardPass& bp) {
                      if (bp.needed(pa)) {
                          auto& ga = bp.buf(pa);
                          const auto& bv = bcap.data();
                          for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                      }
                      if (bp.needed(pb)) {
                          auto& gb = bp.buf(pb);
                          const auto& av = acap.data();
                          for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                      }
                  });
}

Tensor Tape::scale(const Tensor& x, double factor) {
    const auto& xd = x.data();
    std::vector<double> out(xd.size());
    for (size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] * factor;
    int px = recording_ ? ensure_leaf(x) : -1;
    return result(x.shape(), std::move(out), {px},
                  [=](const std::vector<double>& g, BackwardPass& bp) {
                      if (!bp.needed(px)) return;
                      auto& gx = bp.buf(px);
                      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
                  });
}

Tensor Tape::scale_by(const Tensor& s, const Tensor& x) {
    if (s.size() != 1) {
        throw DimensionError("scale_by: scale must hold a single element, got shape " +
                             shape_str(s.shape()));
    }
    const double sv = s.data()[0];
    const auto& xd = x.data();
    std::vector<double> out(xd.size());
    for (size_t i = 0; i < xd.size(); ++i) out[i] = sv * xd[i];
    int ps = -1, px = -1;
    if (recording_) {
        ps = ensure_leaf(s);
        px = ensure_leaf(x);
    }
    Tensor xcap = x;
    return result(x.shape(), std::move(out), {ps, px},
                  [=](const std::vector<double>& g, BackwardPass& bp) {
                      if (bp.needed(ps)) {
                          const auto& xv = xcap.data();
                          double acc = 0.0;
                          for (size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
                          bp.buf(ps)[0] += acc;
                      }
                      if (bp.needed(px)) {
                          auto& gx = bp.buf(px);
                          for (size_t i = 0; i < g.size(); ++i) gx[i] += sv * g[i];
                      }
                  });
}

Tensor Tape::channel_scale(const Tensor& x, const Tensor& s) {
    if (x.rank() != 3) {
        throw DimensionError("channel_scale: expected [C,H,W] input, got " +
                             shape_str(x.shape()));
    }
    if (s.rank() != 1 || s.dim(0) != x.dim(0)) {
        throw DimensionError("channel_scale: weights " + shape_str(s.shape()) +
                             " do not match input " + shape_str(x.shape()));
    }
    const int c = x.dim(0);
    const int64_t hw = static_cast<int64_t>(x.dim(1)) * x.dim(2);
    const auto& xd = x.data();
    const auto& sd = s.data();
    std::vector<double> out(xd.size());
    for (int ch = 0; ch < c; ++ch) {
        const double sv = sd[static_cast<size_t>(ch)];
        for (int64_t p = 0; p < hw; ++p) {
            out[static_cast<size_t>(ch * hw + p)] = sv * xd[static_cast<size_t>(ch * hw + p)];
        }
    }
    int px = -1, ps = -1;
    if (recording_) {
        px = ensure_leaf(x);
        ps = ensure_leaf(s);
    }
    Tensor xcap = x, scap = s;
    return result(x.shape(), std::move(out), {px, ps},
                  [=](const std::vector<double>& g, BackwardPass& bp) {
                      if (bp.needed(px)) {
                          auto& gx = bp.buf(px);
                          const auto& sv = scap.data();
                          for (int ch = 0; ch < c; ++ch)
                              for (int64_t p = 0; p < hw; ++p)
                                  gx[static_cast<size_t>(ch * hw + p)] +=
                                      sv[static_cast<size_t>(ch)] *
                                      g[static_cast<size_t>(ch * hw + p)];
                      }
                      if (bp.needed(ps)) {
                          auto& gs = bp.buf(ps);
                          const auto& xv = xcap.data();
                          for (int ch = 0; ch < c; ++ch) {
                              double acc = 0.0;
                              for (int64_t p = 0; p < hw; ++p)
                                  acc += g[static_cast<size_t>(ch * hw + p)] *
                                         xv[static_cast<size_t>(ch * hw + p)];
                              gs[static_cast<size_t>(ch)] += acc;
                          }
                      }
                  });
}

Tensor Tape::concat_channels(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw DimensionError("concat_channels: no inputs");
    const int h = xs[0].dim(1), w = xs[0].dim(2);
    int ctot = 0;
    for (const auto& x : xs) {
        if (x.rank() != 3 || x.dim(1) != h || x.dim(2) != w) {
            throw DimensionError("concat_channels: incompatible input " + shape_str(x.shape()) +
                                 ", expected [*, " + std::to_string(h) + ", " +
                                 std::to_string(w) + "]");
        }
        ctot += x.dim(0);
    }
    std::vector<double> out;
    out.reserve(static_cast<size_t>(ctot) * h * w);
    std::vector<int> parents;
    std::vector<size_t> sizes;
    for (const auto& x : xs) {
        out.insert(out.end(), x.data().begin(), x.data().end());
        if (recording_) parents.push_back(ensure_leaf(x));
        sizes.push_back(x.data().size());
    }
    if (!recording_) parents.assign(xs.size(), -1);
    return result({ctot, h, w}, std::move(out), parents,
                  [parents, sizes](const std::vector<double>& g, BackwardPass& bp) {
                      size_t off = 0;
                      for (size_t k = 0; k < parents.size(); ++k) {
                          if (bp.needed(parents[k])) {
                              auto& gx = bp.buf(parents[k]);
                              for (size_t i = 0; i < sizes[k]; ++i) gx[i] += g[off + i];
                          }
                          off += sizes[k];
                      }
                  });
}

Tensor Tape::concat_vec(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw DimensionError("concat_vec: no inputs");
    std::vector<double> out;
    std::vector<int> parents;
    std::vector<size_t> sizes;
    for (const auto& x : xs) {
        if (x.rank() != 1) {
            throw DimensionError("concat_vec: expected rank-1 inputs, got " +
                                 shape_str(x.shape()));
        }
        out.insert(out.end(), x.data().begin(), x.data().end());
        if (recording_) parents.push_back(ensure_leaf(x));
        sizes.push_back(x.data().size());
    }
    if (!recording_) parents.assign(xs.size(), -1);
    const int total = static_cast<int>(out.size());
    return result({total}, std::move(out), parents,
                  [parents, sizes](const std::vector<double>& g, BackwardPass& bp) {
                      size_t off = 0;
                      for (size_t k = 0; k < parents.size(); ++k) {
                          if (bp.needed(parents[k])) {
                              auto& gx = bp.buf(parents[k]);
                              for (size_t i = 0; i < sizes[k]; ++i) gx[i] += g[off + i];
                          }
                          off += sizes[k];
                      }
                  });
}

Tensor Tape::reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.size()) {
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                             shape_str(shape));
    }
    int px = recording_ ? ensure_leaf(x) : -1;
    std::vector<double> out = x.data();
    return result(std::move(shape), std::move(out), {px},
                  [=](const std::vector<double>& g, BackwardPass& bp) {
                      if (!bp.needed(px)) return;
                      auto& gx = bp.buf(px);
                      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                  });
}

Tensor Tape::transpose2d(const Tensor& x) {
    if (x.rank() != 2) {
        throw DimensionError("transpose2d: expected rank-2 input, got " + shape_str(x.shape()));
    }
    const int r = x.dim(0), c = x.dim(1);
    const auto& xd = x.data();
    std::vector<double> out(xd.size());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out[static_cast<size_t>(j) * r + i] = xd[static_cast<size_t>(i) * c + j];
    int px = recording_ ? ensure_leaf(x) : -1;
    return result({c, r}, std::move(out), {px},
                  [=](const std::vector<double>& g, BackwardPass& bp) {
                      if (!bp.needed(px)) return;
                      auto& gx = bp.buf(px);
                      for (int i = 0; i < r; ++i)
                          for (int j = 0; j < c; ++j)
                              gx[static_cast<size_t>(i) * c + j] +=
                                  g[static_cast<size_t>(j) * r + i];
                  });
}

Tensor Tape::sum(const Tensor& x) {
    const auto& xd = x.data();
    double s = 0.0;
    for (double v : xd) s += v;
    int px = recording_ ? ensure_leaf(x) : -1;
    const size_t n = xd.size();
    return result({1}, {s}, {px}, [=](const std::vector<double>& g, BackwardPass& bp) {
        if (!bp.needed(px)) return;
        auto& gx = bp.buf(px);
        for (size_t i = 0; i < n; ++i) gx[i] += g[0];
    });
}

Tensor Tape::channel_mean(const Tensor& x) {
    if (x.rank() != 3) {
        throw DimensionError("channel_mean: expected [C,H,W] input, got " +
                             shape_str(x.shape()));
    }
    const int c = x.dim(0);
    const int64_t hw = static_cast<int64_t>(x.dim(1)) * x.dim(2);
    const auto& xd = x.data();
    std::vector<double> out(static_cast<size_t>(c));
    for (int ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (int64_t p = 0; p < hw; ++p) s += xd[static_cast<size_t>(ch * hw + p)];
        out[static_cast<size_t>(ch)] = s / static_cast<double>(hw);
    }
    int px = recording_ ? ensure_leaf(x) : -1;
    return result({c}, std::move(out), {px},
                  [=](const std::vector<double>& g, BackwardPass& bp) {
                      if (!bp.needed(px)) return;
                      auto& gx = bp.buf(px);
                      const double inv = 1.0 / static_cast<double>(hw);
                      for (int ch = 0; ch < c; ++ch)
                          for (int64_t p = 0; p < hw; ++p)
                              gx[static_cast<size_t>(ch * hw + p)] +=
                                  g[static_cast<size_t>(ch)] * inv;
                  });
}

Tensor Tape::channel_var(const Tensor& x) {
    if (x.rank() != 3) {
        throw DimensionError("channel_var: expected [C,H,W] input, got " + shape_str(x.shape()));
    }
    const int c = x.dim(0);
    const int64_t hw = static_cast<int64_t>(x.dim(1)) * x.dim(2);
    const auto& xd = x.data();
    std::vector<double> means(static_cast<size_t>(c));
    std::vector<double> out(static_cast<size_t>(c));
    for (int ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (int64_t p = 0; p < hw; ++p) s += xd[static_cast<size_t>(ch * hw + p)];
        const double mu = s / static_cast<double>(hw);
        means[static_cast<size_t>(ch)] = mu;
        double v = 0.0;
        for (int64_t p = 0; p < hw; ++p) {
            const double d = xd[static_cast<size_t>(ch * hw + p)] - mu;
            v += d * d;
        }
        out[static_cast<size_t>(ch)] = v / static_cast<double>(hw);  // population variance
    }
    int px = recording_ ? ensure_leaf(x) : -1;
    Tensor xcap = x;
    return result({c}, std::move(out), {px},
                  [=](const std::vector<double>& g, BackwardPass& bp) {
                      if (!bp.needed(px)) return;
                      auto& gx = bp.buf(px);
                      const auto& xv = xcap.data();
                      const double inv = 2.0 / static_cast<double>(hw);
                      for (int ch = 0; ch < c; ++ch) {
                          const double mu = means[static_cast<size_t>(ch)];
                          const double gv = g[static_cast<size_t>(ch)];
                          for (int64_t p = 0; p < hw; ++p)
                              gx[static_cast<size_t>(ch * hw + p)] +=
                                  gv * inv * (xv[static_cast<size_t>(ch * hw + p)] - mu);
                      }
                  });
}

Tensor Tape::upsample2_nearest(const Tensor& x) {
    if (x.rank() != 3) {
        throw DimensionError("upsample2_nearest: expected [C,H,W] input, got " +
                             shape_str(x.shape()));
    }
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const auto& xd = x.data();
    std::vector<double> out(static_cast<size_t>(c) * 4 * h * w);
    const int ho = 2 * h, wo = 2 * w;
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < ho; ++y)
            for (int xo = 0; xo < wo; ++xo)
                out[(static_cast<size_t>(ch) * ho + y) * wo + xo] =
                    xd[(static_cast<size_t>(ch) * h + y / 2) * w + xo / 2];
    int px = recording_ ? ensure_leaf(x) : -1;
    return result({c, ho, wo}, std::move(out), {px},
                  [=](const std::vector<double>& g, BackwardPass& bp) {
                      if (!bp.needed(px)) return;
                      auto& gx = bp.buf(px);
                      for (int ch = 0; ch < c; ++ch)
                          for (int y = 0; y < ho; ++y)
                              for (int xo = 0; xo < wo; ++xo)
                                  gx[(static_cast<size_t>(ch) * h + y / 2) * w + xo / 2] +=
                                      g[(static_cast<size_t>(ch) * ho + y) * wo + xo];
                  });
}

Tensor Tape::dropout(const Tensor& x, double rate, std::mt19937_64& rng) {
    if (rate < 0.0 || rate >= 1.0) {
        throw ConfigError("dropout: rate must lie in [0,1), got " + std::to_string(rate));
    }
    if (rate == 0.0) return scale(x, 1.0);
    const auto& xd = x.data();
    const double keep = 1.0 / (1.0 - rate);
    std::vector<double> mask(xd.size());
    for (auto& m : mask) m = rng_unit(rng) < rate ? 0.0 : keep;
    std::vector<double> out(xd.size());
    for (size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] * mask[i];
    int px = recording_ ? ensure_leaf(x) : -1;
    return result(x.shape(), std::move(out), {px},
                  [=](const std::vector<double>& g, BackwardPass& bp) {
                      if (!bp.needed(px)) return;
                      auto& gx = bp.buf(px);
                      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
                  });
}

}  // namespace depthc
