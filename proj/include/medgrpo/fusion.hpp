#pragma once

// Multi-channel temporal fusion. Per modality m:
//   H^(m) = relu(causal_conv(X^(m)))                 (T' x h)
//   Z^(m) = concat_heads(softmax(Q K^T / sqrt(d_k)) V) W_O,  Q = H W_Q, ...
// then Z = [Z^(1) | ... | Z^(M)], G = sigmoid(Z W_g^T + b_g), F = G (.) Z.
//
// Attention is self-attention within one modality; modalities only meet in
// the gate. There is no positional encoding.

#include <vector>

#include "medgrpo/nn.hpp"
#include "medgrpo/rng.hpp"
#include "medgrpo/series.hpp"

namespace medgrpo::fusion {

using nn::Matrix;
using nn::RowVector;

struct FusionDims {
  std::vector<int> modality_dims{3, 3, 2};
  int hidden = 8;  // h
  int heads = 2;
  int kernel_width = 3;

  void validate() const;
};

/// Head j of W_Q / W_K / W_V is the column block [j*d_k, (j+1)*d_k).
struct ModalityEncoder {
  Matrix kernel;         // (kernel_width * d_m) x h; rows [k*d_m, (k+1)*d_m) hold lag k
  RowVector kernel_bias; // h
  Matrix query;          // h x h
  Matrix key;            // h x h
  Matrix value;          // h x h
  Matrix output;         // h x h

  int input_dim(int kernel_width) const { return static_cast<int>(kernel.rows()) / kernel_width; }
};

struct FusionParams {
  int heads = 1;
  int kernel_width = 1;
  std::vector<ModalityEncoder> modalities;
  Matrix gate_weight;    // (M*h) x (M*h)
  RowVector gate_bias;   // M*h

  int hidden() const { return static_cast<int>(gate_weight.rows()) / n_modalities(); }
  int n_modalities() const { return static_cast<int>(modalities.size()); }
  int fused_width() const { return static_cast<int>(gate_weight.rows()); }
  int head_dim() const { return hidden() / heads; }

  nn::TensorViews tensors();
  nn::ConstTensorViews tensors() const;
};

FusionParams init_fusion(const FusionDims& dims, Rng& rng);
FusionParams zeros_like(const FusionParams& params);

struct FusedFeatures {
  Matrix fused;  // F
  Matrix gate;   // G, entries in (0, 1)
};

/// Causal 1-D convolution with left zero padding, then relu.
Matrix encode_modality(const ModalityEncoder& enc, int kernel_width, const Matrix& series);

struct AttentionResult {
  Matrix z;                      // T' x h
  std::vector<Matrix> weights;   // per head, T' x T', rows sum to 1
  std::vector<Matrix> q, k, v;   // per head, T' x d_k
  Matrix heads_concat;           // T' x h, before W_O
};

AttentionResult multi_head_attention(const ModalityEncoder& enc, int heads, const Matrix& hidden);

/// Throws UsageError on mismatched row counts.
Matrix concat_modalities(const std::vector<Matrix>& parts);

FusedFeatures gate(const FusionParams& params, const Matrix& z);

/// Last time row of F.
RowVector pool_state(const FusedFeatures& features);

/// Every intermediate of one fuse() call, kept for the backward pass.
struct FusionTrace {
  std::vector<Matrix> inputs;       // X^(m)
  std::vector<Matrix> conv_pre;     // before relu
  std::vector<Matrix> encoded;      // H^(m)
  std::vector<AttentionResult> attention;
  Matrix z;
  FusedFeatures out;
};

/// Throws ConfigError when a series does not match its encoder, UsageError
/// when series lengths differ.
FusedFeatures fuse(const FusionParams& params, const std::vector<ModalitySeries>& series,
                   FusionTrace* trace = nullptr);

/// Gradient of sum(d_fused (.) F) with respect to every fusion parameter.
FusionParams fuse_backward(const FusionParams& params, const FusionTrace& trace,
                           const Matrix& d_fused);

/// Convenience: the pooled policy input for a set of series.
RowVector fuse_pooled(const FusionParams& params, const std::vector<ModalitySeries>& series);

}  // namespace medgrpo::fusion
