#include "voladapter/autograd.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace voladapter::ag {

using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<Mat>;
using CMapMat = Eigen::Map<const Mat>;
using OStride = Eigen::OuterStride<>;
using SMapMat = Eigen::Map<Mat, 0, OStride>;
using CSMapMat = Eigen::Map<const Mat, 0, OStride>;

namespace {

MapMat as_mat(Tensor& t, int64_t rows, int64_t cols) { return MapMat(t.ptr(), rows, cols); }
CMapMat as_mat(const Tensor& t, int64_t rows, int64_t cols) {
    return CMapMat(t.ptr(), rows, cols);
}

bool any_needs_grad(const std::vector<Var>& vs) {
    for (const auto& v : vs)
        if (v && v->needs_grad) return true;
    return false;
}

}  // namespace

Var Tape::leaf(Tensor v, bool needs_grad) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    n->needs_grad = needs_grad;
    nodes_.push_back(n);
    return n;
}

Var Tape::make(Tensor v, std::vector<Var> parents, std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    n->needs_grad = any_needs_grad(parents);
    n->parents = std::move(parents);
    if (n->needs_grad) n->backprop = std::move(backprop);
    nodes_.push_back(n);
    return n;
}

void Tape::backward(const Var& root) {
    if (root->val.numel() != 1) throw std::invalid_argument("backward root must be scalar");
    root->ensure_grad().data[0] = 1.0f;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node& n = **it;
        if (n.needs_grad && !n.grad.data.empty() && n.backprop) n.backprop(n);
    }
}

// ---------------------------------------------------------------------------
// Elementwise / shape ops
// ---------------------------------------------------------------------------

Var add(Tape& t, const Var& a, const Var& b) {
    if (!a->val.same_shape(b->val)) throw std::invalid_argument("add: shape mismatch");
    Tensor out = a->val;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b->val.data[i];
    return t.make(std::move(out), {a, b}, [a, b](Node& n) {
        for (Var p : {a, b}) {
            if (!p->needs_grad) continue;
            Tensor& g = p->ensure_grad();
            for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i];
        }
    });
}

Var scale(Tape& t, const Var& a, float s) {
    Tensor out = a->val;
    for (auto& v : out.data) v *= s;
    return t.make(std::move(out), {a}, [a, s](Node& n) {
        if (!a->needs_grad) return;
        Tensor& g = a->ensure_grad();
        for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += s * n.grad.data[i];
    });
}

Var gelu(Tape& t, const Var& x) {
    Tensor out = x->val;
    for (auto& v : out.data) {
        double z = v;
        v = static_cast<float>(z * 0.5 * (1.0 + std::erf(z * M_SQRT1_2)));
    }
    return t.make(std::move(out), {x}, [x](Node& n) {
        if (!x->needs_grad) return;
        Tensor& g = x->ensure_grad();
        constexpr double kInvSqrt2Pi = 0.3989422804014327;
        for (size_t i = 0; i < g.data.size(); ++i) {
            double z = x->val.data[i];
            double phi = 0.5 * (1.0 + std::erf(z * M_SQRT1_2));
            double pdf = kInvSqrt2Pi * std::exp(-0.5 * z * z);
            g.data[i] += n.grad.data[i] * static_cast<float>(phi + z * pdf);
        }
    });
}

Var concat_rows(Tape& t, const Var& a, const Var& b) {
    if (a->val.rank() != 2 || b->val.rank() != 2 || a->val.dim(1) != b->val.dim(1))
        throw std::invalid_argument("concat_rows: need [Na,c] and [Nb,c]");
    int64_t na = a->val.dim(0), nb = b->val.dim(0), c = a->val.dim(1);
    Tensor out({na + nb, c});
    std::memcpy(out.ptr(), a->val.ptr(), static_cast<size_t>(na * c) * sizeof(float));
    std::memcpy(out.ptr() + na * c, b->val.ptr(), static_cast<size_t>(nb * c) * sizeof(float));
    return t.make(std::move(out), {a, b}, [a, b, na, nb, c](Node& n) {
        if (a->needs_grad) {
            Tensor& g = a->ensure_grad();
            for (int64_t i = 0; i < na * c; ++i) g.data[i] += n.grad.data[i];
        }
        if (b->needs_grad) {
            Tensor& g = b->ensure_grad();
            for (int64_t i = 0; i < nb * c; ++i) g.data[i] += n.grad.data[na * c + i];
        }
    });
}

Var slice_rows(Tape& t, const Var& x, int64_t row0, int64_t row1) {
    int64_t c = x->val.dim(1);
    Tensor out({row1 - row0, c});
    std::memcpy(out.ptr(), x->val.ptr() + row0 * c,
                static_cast<size_t>((row1 - row0) * c) * sizeof(float));
    return t.make(std::move(out), {x}, [x, row0, row1, c](Node& n) {
        if (!x->needs_grad) return;
        Tensor& g = x->ensure_grad();
        for (int64_t i = 0; i < (row1 - row0) * c; ++i) g.data[row0 * c + i] += n.grad.data[i];
    });
}

Var reshape(Tape& t, const Var& x, std::vector<int64_t> shape) {
    if (Tensor::numel_of(shape) != x->val.numel())
        throw std::invalid_argument("reshape: element count mismatch");
    Tensor out = Tensor::from(std::move(shape), x->val.data);
    return t.make(std::move(out), {x}, [x](Node& n) {
        if (!x->needs_grad) return;
        Tensor& g = x->ensure_grad();
        for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i];
    });
}

// ---------------------------------------------------------------------------
// Linear / norm
// ---------------------------------------------------------------------------

Var linear(Tape& t, const Var& x, const Var& w, const Var& b) {
    int64_t n = x->val.dim(0), in = x->val.dim(1), out_c = w->val.dim(0);
    if (w->val.dim(1) != in) throw std::invalid_argument("linear: weight/input mismatch");
    Tensor out({n, out_c});
    as_mat(out, n, out_c).noalias() = as_mat(x->val, n, in) * as_mat(w->val, out_c, in).transpose();
    if (b) {
        MapMat y = as_mat(out, n, out_c);
        Eigen::Map<const Eigen::RowVectorXf> bias(b->val.ptr(), out_c);
        y.rowwise() += bias;
    }
    std::vector<Var> parents = b ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    return t.make(std::move(out), std::move(parents), [x, w, b, n, in, out_c](Node& nd) {
        CMapMat gy(nd.grad.ptr(), n, out_c);
        if (x->needs_grad)
            as_mat(x->ensure_grad(), n, in).noalias() += gy * as_mat(w->val, out_c, in);
        if (w->needs_grad)
            as_mat(w->ensure_grad(), out_c, in).noalias() += gy.transpose() * as_mat(x->val, n, in);
        if (b && b->needs_grad)
            Eigen::Map<Eigen::RowVectorXf>(b->ensure_grad().ptr(), out_c) += gy.colwise().sum();
    });
}

Var layernorm(Tape& t, const Var& x, const Var& w, const Var& b, float eps) {
    int64_t n = x->val.dim(0), c = x->val.dim(1);
    Tensor out({n, c});
    auto xhat = std::make_shared<Tensor>(Tensor::zeros({n, c}));
    auto inv_std = std::make_shared<std::vector<float>>(static_cast<size_t>(n));
    const float* xp = x->val.ptr();
    float* op = out.ptr();
    float* hp = xhat->ptr();
    for (int64_t i = 0; i < n; ++i) {
        const float* row = xp + i * c;
        double mu = 0;
        for (int64_t j = 0; j < c; ++j) mu += row[j];
        mu /= static_cast<double>(c);
        double var = 0;
        for (int64_t j = 0; j < c; ++j) {
            double d = row[j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(c);
        float is = static_cast<float>(1.0 / std::sqrt(var + eps));
        (*inv_std)[static_cast<size_t>(i)] = is;
        for (int64_t j = 0; j < c; ++j) {
            float h = (row[j] - static_cast<float>(mu)) * is;
            hp[i * c + j] = h;
            op[i * c + j] = h * w->val.data[static_cast<size_t>(j)] + b->val.data[static_cast<size_t>(j)];
        }
    }
    return t.make(std::move(out), {x, w, b}, [x, w, b, xhat, inv_std, n, c](Node& nd) {
        const float* gy = nd.grad.ptr();
        const float* hp = xhat->ptr();
        if (w->needs_grad || b->needs_grad) {
            float* gw = w->needs_grad ? w->ensure_grad().ptr() : nullptr;
            float* gb = b->needs_grad ? b->ensure_grad().ptr() : nullptr;
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < c; ++j) {
                    if (gw) gw[j] += gy[i * c + j] * hp[i * c + j];
                    if (gb) gb[j] += gy[i * c + j];
                }
        }
        if (!x->needs_grad) return;
        float* gx = x->ensure_grad().ptr();
        const float* wp = w->val.ptr();
        for (int64_t i = 0; i < n; ++i) {
            double m1 = 0, m2 = 0;  // mean(ghat), mean(ghat*xhat)
            for (int64_t j = 0; j < c; ++j) {
                double gh = static_cast<double>(gy[i * c + j]) * wp[j];
                m1 += gh;
                m2 += gh * hp[i * c + j];
            }
            m1 /= static_cast<double>(c);
            m2 /= static_cast<double>(c);
            float is = (*inv_std)[static_cast<size_t>(i)];
            for (int64_t j = 0; j < c; ++j) {
                double gh = static_cast<double>(gy[i * c + j]) * wp[j];
                gx[i * c + j] += static_cast<float>(is * (gh - m1 - hp[i * c + j] * m2));
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

namespace {

// Row-wise softmax in place; rows x cols contiguous.
void softmax_rows(float* p, int64_t rows, int64_t cols) {
    for (int64_t i = 0; i < rows; ++i) {
        float* row = p + i * cols;
        float mx = row[0];
        for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
        double sum = 0;
        for (int64_t j = 0; j < cols; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        float inv = static_cast<float>(1.0 / sum);
        for (int64_t j = 0; j < cols; ++j) row[j] *= inv;
    }
}

// ga -> gs for a = softmax(s): gs = a * (ga - rowsum(ga*a))
void softmax_backward_rows(const float* a, const float* ga, float* gs, int64_t rows,
                           int64_t cols) {
    for (int64_t i = 0; i < rows; ++i) {
        const float* ar = a + i * cols;
        const float* gr = ga + i * cols;
        double dot = 0;
        for (int64_t j = 0; j < cols; ++j) dot += static_cast<double>(ar[j]) * gr[j];
        for (int64_t j = 0; j < cols; ++j)
            gs[i * cols + j] = ar[j] * (gr[j] - static_cast<float>(dot));
    }
}

}  // namespace

Var multihead_self_attention(Tape& t, const Var& x, const Var& qkv_w, const Var& qkv_b,
                             const Var& proj_w, const Var& proj_b, int heads) {
    if (x->val.rank() != 3) throw std::invalid_argument("mha: x must be [B,T,c]");
    const int64_t B = x->val.dim(0), T = x->val.dim(1), c = x->val.dim(2);
    if (c % heads != 0) throw std::invalid_argument("mha: heads must divide c");
    const int64_t hd = c / heads;
    const float att_scale = 1.0f / std::sqrt(static_cast<float>(hd));

    auto qkv = std::make_shared<Tensor>(Tensor::zeros({B * T, 3 * c}));
    as_mat(*qkv, B * T, 3 * c).noalias() =
        as_mat(x->val, B * T, c) * as_mat(qkv_w->val, 3 * c, c).transpose();
    as_mat(*qkv, B * T, 3 * c).rowwise() +=
        Eigen::Map<const Eigen::RowVectorXf>(qkv_b->val.ptr(), 3 * c);

    auto attn = std::make_shared<Tensor>(Tensor::zeros({B * heads, T, T}));
    auto ctx = std::make_shared<Tensor>(Tensor::zeros({B * T, c}));  // pre-projection

    for (int64_t b = 0; b < B; ++b) {
        float* base = qkv->ptr() + b * T * 3 * c;
        for (int64_t h = 0; h < heads; ++h) {
            CSMapMat q(base + 0 * c + h * hd, T, hd, OStride(3 * c));
            CSMapMat k(base + 1 * c + h * hd, T, hd, OStride(3 * c));
            CSMapMat v(base + 2 * c + h * hd, T, hd, OStride(3 * c));
            float* ap = attn->ptr() + (b * heads + h) * T * T;
            MapMat s(ap, T, T);
            s.noalias() = q * k.transpose() * att_scale;
            softmax_rows(ap, T, T);
            SMapMat o(ctx->ptr() + b * T * c + h * hd, T, hd, OStride(c));
            o.noalias() = CMapMat(ap, T, T) * v;
        }
    }

    Tensor out({B, T, c});
    as_mat(out, B * T, c).noalias() =
        as_mat(*ctx, B * T, c) * as_mat(proj_w->val, c, c).transpose();
    as_mat(out, B * T, c).rowwise() +=
        Eigen::Map<const Eigen::RowVectorXf>(proj_b->val.ptr(), c);

    return t.make(std::move(out), {x, qkv_w, qkv_b, proj_w, proj_b},
                  [=](Node& nd) {
                      CMapMat gy(nd.grad.ptr(), B * T, c);
                      if (proj_w->needs_grad)
                          as_mat(proj_w->ensure_grad(), c, c).noalias() +=
                              gy.transpose() * as_mat(*ctx, B * T, c);
                      if (proj_b->needs_grad)
                          Eigen::Map<Eigen::RowVectorXf>(proj_b->ensure_grad().ptr(), c) +=
                              gy.colwise().sum();

                      Tensor gctx({B * T, c});
                      as_mat(gctx, B * T, c).noalias() = gy * as_mat(proj_w->val, c, c);

                      Tensor gqkv = Tensor::zeros({B * T, 3 * c});
                      Tensor gs_buf({T, T});
                      for (int64_t b = 0; b < B; ++b) {
                          const float* base = qkv->ptr() + b * T * 3 * c;
                          float* gbase = gqkv.ptr() + b * T * 3 * c;
                          for (int64_t h = 0; h < heads; ++h) {
                              CSMapMat q(base + 0 * c + h * hd, T, hd, OStride(3 * c));
                              CSMapMat k(base + 1 * c + h * hd, T, hd, OStride(3 * c));
                              CSMapMat v(base + 2 * c + h * hd, T, hd, OStride(3 * c));
                              const float* ap = attn->ptr() + (b * heads + h) * T * T;
                              CSMapMat go(gctx.ptr() + b * T * c + h * hd, T, hd, OStride(c));

                              Tensor ga({T, T});
                              as_mat(ga, T, T).noalias() = go * v.transpose();
                              softmax_backward_rows(ap, ga.ptr(), gs_buf.ptr(), T, T);
                              CMapMat gs(gs_buf.ptr(), T, T);

                              SMapMat gq(gbase + 0 * c + h * hd, T, hd, OStride(3 * c));
                              SMapMat gk(gbase + 1 * c + h * hd, T, hd, OStride(3 * c));
                              SMapMat gv(gbase + 2 * c + h * hd, T, hd, OStride(3 * c));
                              gq.noalias() += gs * k * att_scale;
                              gk.noalias() += gs.transpose() * q * att_scale;
                              gv.noalias() += CMapMat(ap, T, T).transpose() * go;
                          }
                      }
                      CMapMat gqkv_m(gqkv.ptr(), B * T, 3 * c);
                      if (x->needs_grad)
                          as_mat(x->ensure_grad(), B * T, c).noalias() +=
                              gqkv_m * as_mat(qkv_w->val, 3 * c, c);
                      if (qkv_w->needs_grad)
                          as_mat(qkv_w->ensure_grad(), 3 * c, c).noalias() +=
                              gqkv_m.transpose() * as_mat(x->val, B * T, c);
                      if (qkv_b->needs_grad)
                          Eigen::Map<Eigen::RowVectorXf>(qkv_b->ensure_grad().ptr(), 3 * c) +=
                              gqkv_m.colwise().sum();
                  });
}

Var cross_attention(Tape& t, const Var& q_in, const Var& kv, const Var& wq, const Var& bq,
                    const Var& wk, const Var& bk, const Var& wv, const Var& bv, const Var& wo,
                    const Var& bo, int heads) {
    const int64_t N = q_in->val.dim(0), M = kv->val.dim(0), c = q_in->val.dim(1);
    if (c % heads != 0) throw std::invalid_argument("cross_attention: heads must divide c");
    const int64_t hd = c / heads;
    const float att_scale = 1.0f / std::sqrt(static_cast<float>(hd));

    auto project = [&](const Var& src, const Var& w, const Var& b, int64_t rows) {
        auto out = std::make_shared<Tensor>(Tensor::zeros({rows, c}));
        as_mat(*out, rows, c).noalias() =
            as_mat(src->val, rows, c) * as_mat(w->val, c, c).transpose();
        as_mat(*out, rows, c).rowwise() +=
            Eigen::Map<const Eigen::RowVectorXf>(b->val.ptr(), c);
        return out;
    };
    auto q = project(q_in, wq, bq, N);
    auto k = project(kv, wk, bk, M);
    auto v = project(kv, wv, bv, M);

    auto attn = std::make_shared<Tensor>(Tensor::zeros({heads, N, M}));
    auto ctx = std::make_shared<Tensor>(Tensor::zeros({N, c}));
    for (int64_t h = 0; h < heads; ++h) {
        CSMapMat qh(q->ptr() + h * hd, N, hd, OStride(c));
        CSMapMat kh(k->ptr() + h * hd, M, hd, OStride(c));
        CSMapMat vh(v->ptr() + h * hd, M, hd, OStride(c));
        float* ap = attn->ptr() + h * N * M;
        MapMat s(ap, N, M);
        s.noalias() = qh * kh.transpose() * att_scale;
        softmax_rows(ap, N, M);
        SMapMat o(ctx->ptr() + h * hd, N, hd, OStride(c));
        o.noalias() = CMapMat(ap, N, M) * vh;
    }

    Tensor out({N, c});
    as_mat(out, N, c).noalias() = as_mat(*ctx, N, c) * as_mat(wo->val, c, c).transpose();
    as_mat(out, N, c).rowwise() += Eigen::Map<const Eigen::RowVectorXf>(bo->val.ptr(), c);

    return t.make(
        std::move(out), {q_in, kv, wq, bq, wk, bk, wv, bv, wo, bo}, [=](Node& nd) {
            CMapMat gy(nd.grad.ptr(), N, c);
            if (wo->needs_grad)
                as_mat(wo->ensure_grad(), c, c).noalias() += gy.transpose() * as_mat(*ctx, N, c);
            if (bo->needs_grad)
                Eigen::Map<Eigen::RowVectorXf>(bo->ensure_grad().ptr(), c) += gy.colwise().sum();

            Tensor gctx({N, c});
            as_mat(gctx, N, c).noalias() = gy * as_mat(wo->val, c, c);

            Tensor gq = Tensor::zeros({N, c});
            Tensor gk = Tensor::zeros({M, c});
            Tensor gv = Tensor::zeros({M, c});
            Tensor gs_buf({N, M});
            for (int64_t h = 0; h < heads; ++h) {
                CSMapMat qh(q->ptr() + h * hd, N, hd, OStride(c));
                CSMapMat kh(k->ptr() + h * hd, M, hd, OStride(c));
                CSMapMat vh(v->ptr() + h * hd, M, hd, OStride(c));
                const float* ap = attn->ptr() + h * N * M;
                CSMapMat go(gctx.ptr() + h * hd, N, hd, OStride(c));

                Tensor ga({N, M});
                as_mat(ga, N, M).noalias() = go * vh.transpose();
                softmax_backward_rows(ap, ga.ptr(), gs_buf.ptr(), N, M);
                CMapMat gs(gs_buf.ptr(), N, M);

                SMapMat gqh(gq.ptr() + h * hd, N, hd, OStride(c));
                SMapMat gkh(gk.ptr() + h * hd, M, hd, OStride(c));
                SMapMat gvh(gv.ptr() + h * hd, M, hd, OStride(c));
                gqh.noalias() += gs * kh * att_scale;
                gkh.noalias() += gs.transpose() * qh * att_scale;
                gvh.noalias() += CMapMat(ap, N, M).transpose() * go;
            }

            auto pull = [&](const Tensor& gproj, const Var& src, const Var& w, const Var& b,
                            int64_t rows) {
                CMapMat gp(gproj.ptr(), rows, c);
                if (src->needs_grad)
                    as_mat(src->ensure_grad(), rows, c).noalias() += gp * as_mat(w->val, c, c);
                if (w->needs_grad)
                    as_mat(w->ensure_grad(), c, c).noalias() +=
                        gp.transpose() * as_mat(src->val, rows, c);
                if (b->needs_grad)
                    Eigen::Map<Eigen::RowVectorXf>(b->ensure_grad().ptr(), c) +=
                        gp.colwise().sum();
            };
            pull(gq, q_in, wq, bq, N);
            pull(gk, kv, wk, bk, M);
            pull(gv, kv, wv, bv, M);
        });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
    int64_t cin, d, h, w;
    int64_t cout, cin_g, kd, kh, kw;
    int64_t od, oh, ow;
    int64_t groups;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, const Conv3dSpec& s) {
    ConvDims cd{};
    cd.cin = x.dim(0);
    cd.d = x.dim(1);
    cd.h = x.dim(2);
    cd.w = x.dim(3);
    cd.cout = w.dim(0);
    cd.cin_g = w.dim(1);
    cd.kd = w.dim(2);
    cd.kh = w.dim(3);
    cd.kw = w.dim(4);
    cd.groups = s.groups;
    if (cd.cin != cd.cin_g * s.groups || cd.cout % s.groups != 0)
        throw std::invalid_argument("conv3d: channel/group mismatch");
    cd.od = (cd.d + 2 * s.pad[0] - cd.kd) / s.stride[0] + 1;
    cd.oh = (cd.h + 2 * s.pad[1] - cd.kh) / s.stride[1] + 1;
    cd.ow = (cd.w + 2 * s.pad[2] - cd.kw) / s.stride[2] + 1;
    if (cd.od < 1 || cd.oh < 1 || cd.ow < 1)
        throw std::invalid_argument("conv3d: kernel larger than padded input");
    return cd;
}

// col layout: [cin_g*kd*kh*kw, od*oh*ow] for one group.
void im2col_group(const float* x, const ConvDims& c, const Conv3dSpec& s, int64_t g,
                  float* col) {
    const int64_t K = c.cin_g * c.kd * c.kh * c.kw;
    const int64_t OV = c.od * c.oh * c.ow;
    for (int64_t ci = 0; ci < c.cin_g; ++ci) {
        const float* xc = x + (g * c.cin_g + ci) * c.d * c.h * c.w;
        for (int64_t kz = 0; kz < c.kd; ++kz)
            for (int64_t ky = 0; ky < c.kh; ++ky)
                for (int64_t kx = 0; kx < c.kw; ++kx) {
                    int64_t krow = ((ci * c.kd + kz) * c.kh + ky) * c.kw + kx;
                    float* crow = col + krow * OV;
                    for (int64_t oz = 0; oz < c.od; ++oz) {
                        int64_t iz = oz * s.stride[0] - s.pad[0] + kz;
                        bool zin = iz >= 0 && iz < c.d;
                        for (int64_t oy = 0; oy < c.oh; ++oy) {
                            int64_t iy = oy * s.stride[1] - s.pad[1] + ky;
                            bool yin = zin && iy >= 0 && iy < c.h;
                            float* dst = crow + (oz * c.oh + oy) * c.ow;
                            if (!yin) {
                                std::fill(dst, dst + c.ow, 0.0f);
                                continue;
                            }
                            const float* src = xc + (iz * c.h + iy) * c.w;
                            for (int64_t ox = 0; ox < c.ow; ++ox) {
                                int64_t ix = ox * s.stride[2] - s.pad[2] + kx;
                                dst[ox] = (ix >= 0 && ix < c.w) ? src[ix] : 0.0f;
                            }
                        }
                    }
                }
    }
    (void)K;
}

// Scatter-add of a col matrix back to the input gradient (inverse of im2col).
void col2im_group(const float* col, const ConvDims& c, const Conv3dSpec& s, int64_t g,
                  float* gx) {
    const int64_t OV = c.od * c.oh * c.ow;
    for (int64_t ci = 0; ci < c.cin_g; ++ci) {
        float* xc = gx + (g * c.cin_g + ci) * c.d * c.h * c.w;
        for (int64_t kz = 0; kz < c.kd; ++kz)
            for (int64_t ky = 0; ky < c.kh; ++ky)
                for (int64_t kx = 0; kx < c.kw; ++kx) {
                    int64_t krow = ((ci * c.kd + kz) * c.kh + ky) * c.kw + kx;
                    const float* crow = col + krow * OV;
                    for (int64_t oz = 0; oz < c.od; ++oz) {
                        int64_t iz = oz * s.stride[0] - s.pad[0] + kz;
                        if (iz < 0 || iz >= c.d) continue;
                        for (int64_t oy = 0; oy < c.oh; ++oy) {
                            int64_t iy = oy * s.stride[1] - s.pad[1] + ky;
                            if (iy < 0 || iy >= c.h) continue;
                            const float* src = crow + (oz * c.oh + oy) * c.ow;
                            float* dst = xc + (iz * c.h + iy) * c.w;
                            for (int64_t ox = 0; ox < c.ow; ++ox) {
                                int64_t ix = ox * s.stride[2] - s.pad[2] + kx;
                                if (ix >= 0 && ix < c.w) dst[ix] += src[ox];
                            }
                        }
                    }
                }
    }
}

}  // namespace

Var conv3d(Tape& t, const Var& x, const Var& w, const Var& b, const Conv3dSpec& spec) {
    if (x->val.rank() != 4 || w->val.rank() != 5)
        throw std::invalid_argument("conv3d: x must be [C,D,H,W], w [O,I,kd,kh,kw]");
    const ConvDims c = conv_dims(x->val, w->val, spec);
    const int64_t K = c.cin_g * c.kd * c.kh * c.kw;
    const int64_t OV = c.od * c.oh * c.ow;
    const int64_t cout_g = c.cout / c.groups;

    Tensor out({c.cout, c.od, c.oh, c.ow});
    {
        Tensor col({K, OV});
        for (int64_t g = 0; g < c.groups; ++g) {
            im2col_group(x->val.ptr(), c, spec, g, col.ptr());
            CMapMat wm(w->val.ptr() + g * cout_g * K, cout_g, K);
            MapMat ym(out.ptr() + g * cout_g * OV, cout_g, OV);
            ym.noalias() = wm * CMapMat(col.ptr(), K, OV);
        }
    }
    if (b) {
        float* op = out.ptr();
        for (int64_t co = 0; co < c.cout; ++co) {
            float bv = b->val.data[static_cast<size_t>(co)];
            for (int64_t i = 0; i < OV; ++i) op[co * OV + i] += bv;
        }
    }

    std::vector<Var> parents = b ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    return t.make(std::move(out), std::move(parents), [x, w, b, c, spec, K, OV,
                                                       cout_g](Node& nd) {
        if (b && b->needs_grad) {
            float* gb = b->ensure_grad().ptr();
            for (int64_t co = 0; co < c.cout; ++co) {
                double s = 0;
                for (int64_t i = 0; i < OV; ++i) s += nd.grad.data[co * OV + i];
                gb[co] += static_cast<float>(s);
            }
        }
        Tensor col({K, OV});
        Tensor gcol({K, OV});
        for (int64_t g = 0; g < c.groups; ++g) {
            CMapMat gym(nd.grad.ptr() + g * cout_g * OV, cout_g, OV);
            if (w->needs_grad) {
                im2col_group(x->val.ptr(), c, spec, g, col.ptr());
                MapMat gwm(w->ensure_grad().ptr() + g * cout_g * K, cout_g, K);
                gwm.noalias() += gym * CMapMat(col.ptr(), K, OV).transpose();
            }
            if (x->needs_grad) {
                CMapMat wm(w->val.ptr() + g * cout_g * K, cout_g, K);
                MapMat(gcol.ptr(), K, OV).noalias() = wm.transpose() * gym;
                col2im_group(gcol.ptr(), c, spec, g, x->ensure_grad().ptr());
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Resampling / layout
// ---------------------------------------------------------------------------

namespace {

struct AxisLerp {
    std::vector<int64_t> i0, i1;
    std::vector<float> w1;  // weight of i1; weight of i0 is 1-w1
};

// Half-pixel-center source coordinates, clamped to the valid range.
AxisLerp make_axis_lerp(int64_t in, int64_t out) {
    AxisLerp a;
    a.i0.resize(static_cast<size_t>(out));
    a.i1.resize(static_cast<size_t>(out));
    a.w1.resize(static_cast<size_t>(out));
    const double r = static_cast<double>(in) / static_cast<double>(out);
    for (int64_t o = 0; o < out; ++o) {
        double s = (static_cast<double>(o) + 0.5) * r - 0.5;
        if (s < 0) s = 0;
        if (s > static_cast<double>(in - 1)) s = static_cast<double>(in - 1);
        int64_t f = static_cast<int64_t>(std::floor(s));
        if (f > in - 2) f = in - 2;
        if (f < 0) f = 0;
        a.i0[static_cast<size_t>(o)] = f;
        a.i1[static_cast<size_t>(o)] = in > 1 ? f + 1 : 0;
        a.w1[static_cast<size_t>(o)] = in > 1 ? static_cast<float>(s - static_cast<double>(f)) : 0.0f;
    }
    return a;
}

}  // namespace

Var upsample_trilinear(Tape& t, const Var& x, Dims3 out_d) {
    const int64_t C = x->val.dim(0), D = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    auto az = std::make_shared<AxisLerp>(make_axis_lerp(D, out_d.d));
    auto ay = std::make_shared<AxisLerp>(make_axis_lerp(H, out_d.h));
    auto ax = std::make_shared<AxisLerp>(make_axis_lerp(W, out_d.w));
    Tensor out({C, out_d.d, out_d.h, out_d.w});
    const float* xp = x->val.ptr();
    float* op = out.ptr();
    for (int64_t ch = 0; ch < C; ++ch) {
        const float* xc = xp + ch * D * H * W;
        float* oc = op + ch * out_d.volume();
        for (int64_t z = 0; z < out_d.d; ++z) {
            int64_t z0 = az->i0[z], z1 = az->i1[z];
            float wz = az->w1[z];
            for (int64_t y = 0; y < out_d.h; ++y) {
                int64_t y0 = ay->i0[y], y1 = ay->i1[y];
                float wy = ay->w1[y];
                for (int64_t xo = 0; xo < out_d.w; ++xo) {
                    int64_t x0 = ax->i0[xo], x1 = ax->i1[xo];
                    float wx = ax->w1[xo];
                    auto v = [&](int64_t zz, int64_t yy, int64_t xx) {
                        return xc[(zz * H + yy) * W + xx];
                    };
                    float c00 = v(z0, y0, x0) * (1 - wx) + v(z0, y0, x1) * wx;
                    float c01 = v(z0, y1, x0) * (1 - wx) + v(z0, y1, x1) * wx;
                    float c10 = v(z1, y0, x0) * (1 - wx) + v(z1, y0, x1) * wx;
                    float c11 = v(z1, y1, x0) * (1 - wx) + v(z1, y1, x1) * wx;
                    float c0 = c00 * (1 - wy) + c01 * wy;
                    float c1 = c10 * (1 - wy) + c11 * wy;
                    oc[(z * out_d.h + y) * out_d.w + xo] = c0 * (1 - wz) + c1 * wz;
                }
            }
        }
    }
    return t.make(std::move(out), {x}, [x, az, ay, ax, C, D, H, W, out_d](Node& nd) {
        if (!x->needs_grad) return;
        float* gx = x->ensure_grad().ptr();
        const float* gy = nd.grad.ptr();
        for (int64_t ch = 0; ch < C; ++ch) {
            float* gc = gx + ch * D * H * W;
            const float* oc = gy + ch * out_d.volume();
            for (int64_t z = 0; z < out_d.d; ++z) {
                int64_t z0 = az->i0[z], z1 = az->i1[z];
                float wz = az->w1[z];
                for (int64_t y = 0; y < out_d.h; ++y) {
                    int64_t y0 = ay->i0[y], y1 = ay->i1[y];
                    float wy = ay->w1[y];
                    for (int64_t xo = 0; xo < out_d.w; ++xo) {
                        int64_t x0 = ax->i0[xo], x1 = ax->i1[xo];
                        float wx = ax->w1[xo];
                        float g = oc[(z * out_d.h + y) * out_d.w + xo];
                        auto acc = [&](int64_t zz, int64_t yy, int64_t xx, float w) {
                            gc[(zz * H + yy) * W + xx] += g * w;
                        };
                        acc(z0, y0, x0, (1 - wz) * (1 - wy) * (1 - wx));
                        acc(z0, y0, x1, (1 - wz) * (1 - wy) * wx);
                        acc(z0, y1, x0, (1 - wz) * wy * (1 - wx));
                        acc(z0, y1, x1, (1 - wz) * wy * wx);
                        acc(z1, y0, x0, wz * (1 - wy) * (1 - wx));
                        acc(z1, y0, x1, wz * (1 - wy) * wx);
                        acc(z1, y1, x0, wz * wy * (1 - wx));
                        acc(z1, y1, x1, wz * wy * wx);
                    }
                }
            }
        }
    });
}

Var concat_channels(Tape& t, const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_channels: empty list");
    int64_t D = xs[0]->val.dim(1), H = xs[0]->val.dim(2), W = xs[0]->val.dim(3);
    int64_t ctot = 0;
    for (const auto& v : xs) {
        if (v->val.dim(1) != D || v->val.dim(2) != H || v->val.dim(3) != W)
            throw std::invalid_argument("concat_channels: spatial dims differ");
        ctot += v->val.dim(0);
    }
    Tensor out({ctot, D, H, W});
    int64_t off = 0;
    for (const auto& v : xs) {
        std::memcpy(out.ptr() + off, v->val.ptr(),
                    static_cast<size_t>(v->val.numel()) * sizeof(float));
        off += v->val.numel();
    }
    return t.make(std::move(out), xs, [xs](Node& nd) {
        int64_t off = 0;
        for (const auto& v : xs) {
            if (v->needs_grad) {
                Tensor& g = v->ensure_grad();
                for (int64_t i = 0; i < v->val.numel(); ++i) g.data[i] += nd.grad.data[off + i];
            }
            off += v->val.numel();
        }
    });
}

namespace {

struct WinDims {
    int64_t nd, nh, nw, n_win, win_vol;
};

WinDims win_dims(Dims3 grid, Dims3 window) {
    WinDims wd{};
    wd.nd = (grid.d + window.d - 1) / window.d;
    wd.nh = (grid.h + window.h - 1) / window.h;
    wd.nw = (grid.w + window.w - 1) / window.w;
    wd.n_win = wd.nd * wd.nh * wd.nw;
    wd.win_vol = window.volume();
    return wd;
}

}  // namespace

Var gather_windows(Tape& t, const Var& tokens, Dims3 grid, Dims3 window) {
    const int64_t c = tokens->val.dim(1);
    const WinDims wd = win_dims(grid, window);
    Tensor out = Tensor::zeros({wd.n_win, wd.win_vol, c});
    const float* tp = tokens->val.ptr();
    float* op = out.ptr();
    for (int64_t wz = 0; wz < wd.nd; ++wz)
        for (int64_t wy = 0; wy < wd.nh; ++wy)
            for (int64_t wx = 0; wx < wd.nw; ++wx) {
                int64_t win = (wz * wd.nh + wy) * wd.nw + wx;
                for (int64_t dz = 0; dz < window.d; ++dz) {
                    int64_t gz = wz * window.d + dz;
                    if (gz >= grid.d) continue;
                    for (int64_t dy = 0; dy < window.h; ++dy) {
                        int64_t gy = wy * window.h + dy;
                        if (gy >= grid.h) continue;
                        for (int64_t dx = 0; dx < window.w; ++dx) {
                            int64_t gx = wx * window.w + dx;
                            if (gx >= grid.w) continue;
                            int64_t tok = (gz * grid.h + gy) * grid.w + gx;
                            int64_t slot = (dz * window.h + dy) * window.w + dx;
                            std::memcpy(op + (win * wd.win_vol + slot) * c, tp + tok * c,
                                        static_cast<size_t>(c) * sizeof(float));
                        }
                    }
                }
            }
    return t.make(std::move(out), {tokens}, [tokens, grid, window, wd, c](Node& nd) {
        if (!tokens->needs_grad) return;
        float* gt = tokens->ensure_grad().ptr();
        const float* gp = nd.grad.ptr();
        for (int64_t wz = 0; wz < wd.nd; ++wz)
            for (int64_t wy = 0; wy < wd.nh; ++wy)
                for (int64_t wx = 0; wx < wd.nw; ++wx) {
                    int64_t win = (wz * wd.nh + wy) * wd.nw + wx;
                    for (int64_t dz = 0; dz < window.d; ++dz) {
                        int64_t gz = wz * window.d + dz;
                        if (gz >= grid.d) continue;
                        for (int64_t dy = 0; dy < window.h; ++dy) {
                            int64_t gy = wy * window.h + dy;
                            if (gy >= grid.h) continue;
                            for (int64_t dx = 0; dx < window.w; ++dx) {
                                int64_t gx = wx * window.w + dx;
                                if (gx >= grid.w) continue;
                                int64_t tok = (gz * grid.h + gy) * grid.w + gx;
                                int64_t slot = (dz * window.h + dy) * window.w + dx;
                                const float* src = gp + (win * wd.win_vol + slot) * c;
                                float* dst = gt + tok * c;
                                for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
                            }
                        }
                    }
                }
    });
}

Var scatter_windows(Tape& t, const Var& wins, Dims3 grid, Dims3 window) {
    const int64_t c = wins->val.dim(2);
    const WinDims wd = win_dims(grid, window);
    if (wins->val.dim(0) != wd.n_win || wins->val.dim(1) != wd.win_vol)
        throw std::invalid_argument("scatter_windows: window count mismatch");
    Tensor out({grid.volume(), c});
    const float* wp = wins->val.ptr();
    float* op = out.ptr();
    for (int64_t gz = 0; gz < grid.d; ++gz)
        for (int64_t gy = 0; gy < grid.h; ++gy)
            for (int64_t gx = 0; gx < grid.w; ++gx) {
                int64_t win = ((gz / window.d) * wd.nh + gy / window.h) * wd.nw + gx / window.w;
                int64_t slot =
                    ((gz % window.d) * window.h + gy % window.h) * window.w + gx % window.w;
                int64_t tok = (gz * grid.h + gy) * grid.w + gx;
                std::memcpy(op + tok * c, wp + (win * wd.win_vol + slot) * c,
                            static_cast<size_t>(c) * sizeof(float));
            }
    return t.make(std::move(out), {wins}, [wins, grid, window, wd, c](Node& nd) {
        if (!wins->needs_grad) return;
        float* gw = wins->ensure_grad().ptr();
        const float* gp = nd.grad.ptr();
        for (int64_t gz = 0; gz < grid.d; ++gz)
            for (int64_t gy = 0; gy < grid.h; ++gy)
                for (int64_t gx = 0; gx < grid.w; ++gx) {
                    int64_t win =
                        ((gz / window.d) * wd.nh + gy / window.h) * wd.nw + gx / window.w;
                    int64_t slot =
                        ((gz % window.d) * window.h + gy % window.h) * window.w + gx % window.w;
                    int64_t tok = (gz * grid.h + gy) * grid.w + gx;
                    const float* src = gp + tok * c;
                    float* dst = gw + (win * wd.win_vol + slot) * c;
                    for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
                }
    });
}

Var add_pos3d(Tape& t, const Var& tokens, const Var& pos2d, const Var& depth, Dims3 grid) {
    const int64_t c = tokens->val.dim(1);
    if (pos2d->val.dim(0) != c || pos2d->val.dim(1) != grid.h || pos2d->val.dim(2) != grid.w)
        throw std::invalid_argument("add_pos3d: pos2d shape mismatch");
    if (depth->val.dim(0) != c || depth->val.dim(1) != grid.d)
        throw std::invalid_argument("add_pos3d: depth table shape mismatch");
    Tensor out = tokens->val;
    float* op = out.ptr();
    const float* p2 = pos2d->val.ptr();
    const float* pd = depth->val.ptr();
    for (int64_t z = 0; z < grid.d; ++z)
        for (int64_t y = 0; y < grid.h; ++y)
            for (int64_t x = 0; x < grid.w; ++x) {
                float* row = op + ((z * grid.h + y) * grid.w + x) * c;
                for (int64_t ch = 0; ch < c; ++ch)
                    row[ch] += p2[(ch * grid.h + y) * grid.w + x] + pd[ch * grid.d + z];
            }
    return t.make(std::move(out), {tokens, pos2d, depth}, [tokens, pos2d, depth, grid,
                                                           c](Node& nd) {
        const float* gp = nd.grad.ptr();
        if (tokens->needs_grad) {
            Tensor& g = tokens->ensure_grad();
            for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += gp[i];
        }
        if (pos2d->needs_grad) {
            float* g = pos2d->ensure_grad().ptr();
            for (int64_t z = 0; z < grid.d; ++z)
                for (int64_t y = 0; y < grid.h; ++y)
                    for (int64_t x = 0; x < grid.w; ++x) {
                        const float* row = gp + ((z * grid.h + y) * grid.w + x) * c;
                        for (int64_t ch = 0; ch < c; ++ch)
                            g[(ch * grid.h + y) * grid.w + x] += row[ch];
                    }
        }
        if (depth->needs_grad) {
            float* g = depth->ensure_grad().ptr();
            for (int64_t z = 0; z < grid.d; ++z)
                for (int64_t y = 0; y < grid.h; ++y)
                    for (int64_t x = 0; x < grid.w; ++x) {
                        const float* row = gp + ((z * grid.h + y) * grid.w + x) * c;
                        for (int64_t ch = 0; ch < c; ++ch) g[ch * grid.d + z] += row[ch];
                    }
        }
    });
}

Var sample_grid_points(Tape& t, const Var& tokens, Dims3 grid,
                       const std::vector<std::array<double, 3>>& points) {
    const int64_t c = tokens->val.dim(1);
    const int64_t k = static_cast<int64_t>(points.size());
    struct Corner {
        int64_t tok;
        float w;
    };
    auto corners = std::make_shared<std::vector<std::array<Corner, 8>>>(points.size());
    for (size_t i = 0; i < points.size(); ++i) {
        double pz = points[i][0], py = points[i][1], px = points[i][2];
        auto split = [](double v, int64_t n, int64_t& i0, int64_t& i1, double& w) {
            if (v < 0) v = 0;
            if (v > static_cast<double>(n - 1)) v = static_cast<double>(n - 1);
            i0 = static_cast<int64_t>(std::floor(v));
            if (i0 > n - 2) i0 = std::max<int64_t>(0, n - 2);
            i1 = n > 1 ? i0 + 1 : 0;
            w = n > 1 ? v - static_cast<double>(i0) : 0.0;
        };
        int64_t z0, z1, y0, y1, x0, x1;
        double wz, wy, wx;
        split(pz, grid.d, z0, z1, wz);
        split(py, grid.h, y0, y1, wy);
        split(px, grid.w, x0, x1, wx);
        int ci = 0;
        for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) {
                    int64_t z = dz ? z1 : z0, y = dy ? y1 : y0, x = dx ? x1 : x0;
                    double w = (dz ? wz : 1 - wz) * (dy ? wy : 1 - wy) * (dx ? wx : 1 - wx);
                    (*corners)[i][ci++] = {(z * grid.h + y) * grid.w + x,
                                           static_cast<float>(w)};
                }
    }
    Tensor out = Tensor::zeros({k, c});
    const float* tp = tokens->val.ptr();
    for (int64_t i = 0; i < k; ++i) {
        float* row = out.ptr() + i * c;
        for (const Corner& cn : (*corners)[static_cast<size_t>(i)]) {
            const float* src = tp + cn.tok * c;
            for (int64_t j = 0; j < c; ++j) row[j] += cn.w * src[j];
        }
    }
    return t.make(std::move(out), {tokens}, [tokens, corners, k, c](Node& nd) {
        if (!tokens->needs_grad) return;
        float* gt = tokens->ensure_grad().ptr();
        for (int64_t i = 0; i < k; ++i) {
            const float* row = nd.grad.ptr() + i * c;
            for (const Corner& cn : (*corners)[static_cast<size_t>(i)]) {
                float* dst = gt + cn.tok * c;
                for (int64_t j = 0; j < c; ++j) dst[j] += cn.w * row[j];
            }
        }
    });
}

Var chw_to_tokens(Tape& t, const Var& x) {
    const int64_t C = x->val.dim(0), V = x->val.numel() / C;
    Tensor out({V, C});
    const float* xp = x->val.ptr();
    float* op = out.ptr();
    for (int64_t ch = 0; ch < C; ++ch)
        for (int64_t i = 0; i < V; ++i) op[i * C + ch] = xp[ch * V + i];
    return t.make(std::move(out), {x}, [x, C, V](Node& nd) {
        if (!x->needs_grad) return;
        float* g = x->ensure_grad().ptr();
        const float* gp = nd.grad.ptr();
        for (int64_t ch = 0; ch < C; ++ch)
            for (int64_t i = 0; i < V; ++i) g[ch * V + i] += gp[i * C + ch];
    });
}

Var tokens_to_chw(Tape& t, const Var& x, Dims3 grid) {
    const int64_t V = x->val.dim(0), C = x->val.dim(1);
    if (V != grid.volume()) throw std::invalid_argument("tokens_to_chw: grid mismatch");
    Tensor out({C, grid.d, grid.h, grid.w});
    const float* xp = x->val.ptr();
    float* op = out.ptr();
    for (int64_t i = 0; i < V; ++i)
        for (int64_t ch = 0; ch < C; ++ch) op[ch * V + i] = xp[i * C + ch];
    return t.make(std::move(out), {x}, [x, C, V](Node& nd) {
        if (!x->needs_grad) return;
        float* g = x->ensure_grad().ptr();
        const float* gp = nd.grad.ptr();
        for (int64_t i = 0; i < V; ++i)
            for (int64_t ch = 0; ch < C; ++ch) g[i * C + ch] += gp[ch * V + i];
    });
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

Var dice_ce_loss(Tape& t, const Var& logits, const Tensor& target, float smooth,
                 float ce_clamp) {
    if (!logits->val.same_shape(target))
        throw std::invalid_argument("dice_ce_loss: logits/target shape mismatch");
    const int64_t n = logits->val.numel();
    for (float v : target.data)
        if (v != 0.0f && v != 1.0f)
            throw std::invalid_argument("dice_ce_loss: target must be binary");

    // Accumulate in double; the per-element terms stay float32 like the
    // forward activations.
    double inter = 0, psum = 0, tsum = 0;
    const float* zp = logits->val.ptr();
    const float* tp = target.ptr();
    for (int64_t i = 0; i < n; ++i) {
        if (!std::isfinite(zp[i])) throw std::domain_error("dice_ce_loss: non-finite logit");
        double p = 1.0 / (1.0 + std::exp(-static_cast<double>(zp[i])));
        inter += p * tp[i];
        psum += p;
        tsum += tp[i];
    }
    double ce = 0;
    for (int64_t i = 0; i < n; ++i) {
        double z = zp[i];
        double zc = std::clamp(z, -static_cast<double>(ce_clamp), static_cast<double>(ce_clamp));
        double sp = zc > 30 ? zc : std::log1p(std::exp(zc));
        ce += sp - tp[i] * zc;
    }
    double dice = 1.0 - (2.0 * inter + smooth) / (psum + tsum + smooth);
    Tensor out = Tensor::from({1}, {static_cast<float>(dice + ce / static_cast<double>(n))});

    auto tgt = std::make_shared<Tensor>(target);
    return t.make(std::move(out), {logits}, [logits, tgt, n, smooth, ce_clamp, inter, psum,
                                             tsum](Node& nd) {
        if (!logits->needs_grad) return;
        const float g0 = nd.grad.data[0];
        const double denom = psum + tsum + static_cast<double>(smooth);
        const double num = 2.0 * inter + static_cast<double>(smooth);
        float* gz = logits->ensure_grad().ptr();
        const float* zp = logits->val.ptr();
        const float* tp = tgt->ptr();
        for (int64_t i = 0; i < n; ++i) {
            double z = zp[i];
            double p = 1.0 / (1.0 + std::exp(-z));
            // dice: d/dp [1 - (2A+s)/(B+s)] = -2t/(B+s) + (2A+s)/(B+s)^2
            double ddice_dp = -2.0 * tp[i] / denom + num / (denom * denom);
            double dd = ddice_dp * p * (1.0 - p);
            // ce: clamp gate, then (sigmoid(zc) - t)/n
            double dce = 0;
            if (std::abs(z) <= static_cast<double>(ce_clamp)) dce = (p - tp[i]) / static_cast<double>(n);
            gz[i] += g0 * static_cast<float>(dd + dce);
        }
    });
}

}  // namespace voladapter::ag
