#pragma once

#include <array>
#include <functional>
#include <memory>
#include <vector>

#include "voladapter/tensor.hpp"

namespace voladapter::ag {

struct Node;
using Var = std::shared_ptr<Node>;

/// One value on the tape. `grad` is allocated on first accumulation.
struct Node {
    Tensor val;
    Tensor grad;
    bool needs_grad = false;
    std::function<void(Node&)> backprop;  // pulls this->grad into parents
    std::vector<Var> parents;

    Tensor& ensure_grad() {
        if (grad.data.empty()) grad = Tensor::zeros(val.shape);
        return grad;
    }
};

/// Records nodes in creation order; backward() walks them in reverse.
/// Creation order is a valid topological order because every op's inputs
/// exist before its output.
class Tape {
public:
    Var leaf(Tensor v, bool needs_grad = false);
    Var make(Tensor v, std::vector<Var> parents, std::function<void(Node&)> backprop);

    /// Seeds d(root)/d(root) = 1 (root must be scalar) and back-propagates.
    void backward(const Var& root);

    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

private:
    std::vector<Var> nodes_;
};

struct Dims3 {
    int64_t d = 0, h = 0, w = 0;
    int64_t volume() const { return d * h * w; }
    bool operator==(const Dims3&) const = default;
};

// ---------------------------------------------------------------------------
// Ops. All tensors are row-major float. Shapes noted per op.
// ---------------------------------------------------------------------------

Var add(Tape& t, const Var& a, const Var& b);                   // same shape
Var scale(Tape& t, const Var& a, float s);
Var gelu(Tape& t, const Var& x);                                // exact erf form
Var concat_rows(Tape& t, const Var& a, const Var& b);           // [Na,c]+[Nb,c]
Var slice_rows(Tape& t, const Var& x, int64_t row0, int64_t row1);
Var reshape(Tape& t, const Var& x, std::vector<int64_t> shape);

/// y = x * W^T + b.  x:[N,in]  W:[out,in]  b:[out] (optional, may be null)
Var linear(Tape& t, const Var& x, const Var& w, const Var& b);

/// Row-wise layer norm over the last dim. x:[N,c] w,b:[c]
Var layernorm(Tape& t, const Var& x, const Var& w, const Var& b, float eps = 1e-6f);

/// Batched multi-head self-attention. x:[B,T,c], qkv_w:[3c,c], qkv_b:[3c],
/// proj_w:[c,c], proj_b:[c]. Returns [B,T,c] (no residual).
Var multihead_self_attention(Tape& t, const Var& x, const Var& qkv_w, const Var& qkv_b,
                             const Var& proj_w, const Var& proj_b, int heads);

/// Cross-attention: queries from q_in:[N,c], keys/values from kv:[M,c].
/// All projections [c,c] with [c] biases. Returns [N,c] (no residual).
Var cross_attention(Tape& t, const Var& q_in, const Var& kv, const Var& wq, const Var& bq,
                    const Var& wk, const Var& bk, const Var& wv, const Var& bv, const Var& wo,
                    const Var& bo, int heads);

struct Conv3dSpec {
    std::array<int64_t, 3> stride{1, 1, 1};
    std::array<int64_t, 3> pad{0, 0, 0};
    int64_t groups = 1;
};

/// x:[Cin,D,H,W], w:[Cout,Cin/groups,kd,kh,kw], b:[Cout] (optional).
Var conv3d(Tape& t, const Var& x, const Var& w, const Var& b, const Conv3dSpec& spec);

/// Trilinear resize of x:[C,D,H,W] to [C,out.d,out.h,out.w], half-pixel centers.
Var upsample_trilinear(Tape& t, const Var& x, Dims3 out);

/// Concatenate [Ci,D,H,W] tensors along the channel axis.
Var concat_channels(Tape& t, const std::vector<Var>& xs);

/// Tokens [N,c] laid out d-major on `grid` -> zero-padded non-overlapping
/// windows [nWin, winVol, c].
Var gather_windows(Tape& t, const Var& tokens, Dims3 grid, Dims3 window);

/// Inverse of gather_windows: crops the zero padding back off.
Var scatter_windows(Tape& t, const Var& wins, Dims3 grid, Dims3 window);

/// tokens:[N,c] on grid + pos2d:[c,H,W] (broadcast over d) + depth:[c,D]
/// (broadcast over h,w).
Var add_pos3d(Tape& t, const Var& tokens, const Var& pos2d, const Var& depth, Dims3 grid);

/// Trilinear point sampling of a token grid. tokens:[N,c] on `grid`,
/// points: k rows of (d,h,w) grid coordinates, already clamped in-range.
/// Returns [k,c]. Points are constants.
Var sample_grid_points(Tape& t, const Var& tokens, Dims3 grid,
                       const std::vector<std::array<double, 3>>& points);

/// [C,D,H,W] <-> token matrix [D*H*W, C] (d-major rows).
Var chw_to_tokens(Tape& t, const Var& x);
Var tokens_to_chw(Tape& t, const Var& x, Dims3 grid);

/// DiceCE loss (scalar). logits/target: same shape, target in {0,1}.
/// smooth is the Dice smoothing term; CE clamps logits to +-ce_clamp.
Var dice_ce_loss(Tape& t, const Var& logits, const Tensor& target, float smooth = 1e-5f,
                 float ce_clamp = 20.0f);

/// Loss formula shared with the autograd op so tests can evaluate it at
/// double precision. `logits`/`target` are element streams of length n.
template <typename T>
T dice_ce_formula(const T* logits, const float* target, int64_t n, T smooth, T ce_clamp) {
    T inter = 0, psum = 0, tsum = 0, ce = 0;
    for (int64_t i = 0; i < n; ++i) {
        T z = logits[i];
        T p = T(1) / (T(1) + std::exp(-z));
        T tv = T(target[i]);
        inter += p * tv;
        psum += p;
        tsum += tv;
        T zc = z > ce_clamp ? ce_clamp : (z < -ce_clamp ? -ce_clamp : z);
        // softplus(zc) - t*zc, with the stable branch for large positive zc
        T sp = zc > T(30) ? zc : std::log(T(1) + std::exp(zc));
        ce += sp - tv * zc;
    }
    T dice = T(1) - (T(2) * inter + smooth) / (psum + tsum + smooth);
    return dice + ce / T(n);
}

}  // namespace voladapter::ag
