#pragma once

#include <optional>
#include <vector>

#include "mrw/autograd.hpp"
#include "mrw/tensor.hpp"

namespace mrw {

enum class Padding { kValid, kSame };
enum class PoolKind { kMax, kAvg };
enum class Act { kRelu, kPrelu, kSigmoid, kTanh };
enum class Mode { kTrain, kEval };

// Cross-correlation semantics (no kernel flip). x [B,Cin,L], w [Cout,Cin/g,K].
// kValid: Lout = floor((L - dilation*(K-1) - 1)/stride) + 1.
// kSame:  Lout = ceil(L/stride); zero padding split symmetrically, the extra
//         sample on the left when the total is odd.
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
              int dilation, Padding padding, int groups);

// Adjoint of a strided convolution. x [B,C,L], w [C,Cout,K] ->
// [B,Cout,(L-1)*stride+K]; overlapping contributions sum.
Tensor conv_transpose1d(const Tensor& x, const Tensor& w, int stride);

// Windowed max/mean per channel. Lout = floor((L-k)/s) + 1; requires k <= L.
Tensor pool1d(const Tensor& x, PoolKind kind, int k, int s);

// Mean over the temporal axis: [B,C,L] -> [B,C,1].
Tensor adaptive_avg_pool(const Tensor& x);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh_op(const Tensor& x);
// slope has one entry per channel of x (axis 1 for rank 3, axis 1 for rank 2).
Tensor prelu(const Tensor& x, const Tensor& slope);
Tensor activation(const Tensor& x, Act kind, const Tensor& slope = {});

// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, int axis);

// Normalizes jointly over channel and time per batch item, then applies a
// per-channel affine. x [B,C,L], gamma/beta [C].
Tensor global_layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps);

// Per-channel normalization over batch (and time for rank 3). Train mode uses
// batch statistics and updates the running buffers with `momentum`; eval mode
// uses the running buffers verbatim.
Tensor batch_norm1d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, Mode mode,
                    double momentum, double eps);

// y = x W^T + b. x [B,Din], w [Dout,Din], bias [Dout] or undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& x, double v);
Tensor mul_scalar(const Tensor& x, double v);
Tensor abs_op(const Tensor& x);
Tensor log1p_op(const Tensor& x);
Tensor sqrt_op(const Tensor& x);
Tensor square(const Tensor& x);

Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, int start, int length);
// Copying reshape; total element count must match.
Tensor reshape(const Tensor& x, std::vector<int> shape);

// [B,C,1] -> [B,C,L] by repetition over time.
Tensor broadcast_time(const Tensor& x, int length);
// [B,C,L] -> [B,C,1]; mean when `mean` is set, else sum.
Tensor reduce_time(const Tensor& x, bool mean);
Tensor reduce_sum_all(const Tensor& x);
Tensor reduce_mean_all(const Tensor& x);

// x [B,C,L] * s [B,C,1], broadcast over time.
Tensor scale_channels(const Tensor& x, const Tensor& s);
// x [B,C,L] + b [C], broadcast over batch and time.
Tensor add_channel_bias(const Tensor& x, const Tensor& b);

// Row-wise x / ||x||; eps keeps the zero row finite.
Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12);

// Mean over rows of -log softmax(logits)[label]; numerically stabilized.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Additive angular margin on the target entry of a cosine matrix [B,N]:
// cos(theta) -> cos(theta + m) on the principal branch, with the standard
// guard cos(theta) <= cos(pi - m) falling back to cos(theta) - m*sin(m).
Tensor aam_adjust(const Tensor& cosines, const std::vector<int>& labels, double margin);

// Learnable band-pass kernel bank: per filter, the difference of two windowed
// ideal low-pass responses at cutoffs derived from (f_lo, f_bw), scaled by
// `gain`. Cutoffs are normalized frequencies clamped into [0, 0.5]; bandwidth
// has a floor of `min_band`. A collapsed band yields an all-zero filter.
// Output [F, 1, kernel], suitable as a conv1d weight.
Tensor param_fbank_kernel(const Tensor& f_lo, const Tensor& f_bw, const Tensor& gain,
                          int kernel, double min_band);

}  // namespace mrw
