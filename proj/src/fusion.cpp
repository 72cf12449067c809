#include "medgrpo/fusion.hpp"

#include <cmath>
#include <string>

#include "medgrpo/errors.hpp"

namespace medgrpo::fusion {

void FusionDims::validate() const {
  if (modality_dims.empty()) throw ConfigError("fusion: at least one modality is required");
  for (int d : modality_dims)
    if (d < 1) throw ConfigError("fusion: modality dimensions must be >= 1");
  if (hidden < 1 || heads < 1) throw ConfigError("fusion: hidden and heads must be >= 1");
  if (hidden % heads != 0)
    throw ConfigError("fusion: hidden (" + std::to_string(hidden) +
                      ") must be divisible by heads (" + std::to_string(heads) + ")");
  if (kernel_width < 1) throw ConfigError("fusion: kernel_width must be >= 1");
}

namespace {

Matrix glorot(int rows, int cols, int fan_in, int fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

int modality_width(const ModalityEncoder& enc, int kernel_width) {
  return enc.input_dim(kernel_width);
}

}  // namespace

nn::TensorViews FusionParams::tensors() {
  nn::TensorViews out;
  for (auto& m : modalities) {
    out.push_back(nn::view(m.kernel));
    out.push_back(nn::view(m.kernel_bias));
    out.push_back(nn::view(m.query));
    out.push_back(nn::view(m.key));
    out.push_back(nn::view(m.value));
    out.push_back(nn::view(m.output));
  }
  out.push_back(nn::view(gate_weight));
  out.push_back(nn::view(gate_bias));
  return out;
}

nn::ConstTensorViews FusionParams::tensors() const {
  nn::ConstTensorViews out;
  for (const auto& m : modalities) {
    out.push_back(nn::view(m.kernel));
    out.push_back(nn::view(m.kernel_bias));
    out.push_back(nn::view(m.query));
    out.push_back(nn::view(m.key));
    out.push_back(nn::view(m.value));
    out.push_back(nn::view(m.output));
  }
  out.push_back(nn::view(gate_weight));
  out.push_back(nn::view(gate_bias));
  return out;
}

FusionParams init_fusion(const FusionDims& dims, Rng& rng) {
  dims.validate();
  const int h = dims.hidden;
  const int w = dims.kernel_width;
  FusionParams p;
  p.heads = dims.heads;
  p.kernel_width = w;
  for (int dm : dims.modality_dims) {
    ModalityEncoder enc;
    enc.kernel = glorot(w * dm, h, w * dm, h, rng);
    enc.kernel_bias = RowVector::Zero(h);
    enc.query = glorot(h, h, h, h, rng);
    enc.key = glorot(h, h, h, h, rng);
    enc.value = glorot(h, h, h, h, rng);
    enc.output = glorot(h, h, h, h, rng);
    p.modalities.push_back(std::move(enc));
  }
  const int width = h * static_cast<int>(dims.modality_dims.size());
  p.gate_weight = glorot(width, width, width, width, rng);
  p.gate_bias = RowVector::Zero(width);
  return p;
}

FusionParams zeros_like(const FusionParams& params) {
  FusionParams z = params;
  for (auto t : z.tensors())
    for (double& x : t) x = 0.0;
  return z;
}

namespace {

Matrix conv_pre_activation(const ModalityEncoder& enc, int kernel_width, const Matrix& x) {
  const int dm = modality_width(enc, kernel_width);
  if (x.cols() != dm)
    throw ConfigError("encode_modality: series has " + std::to_string(x.cols()) +
                      " features, encoder expects " + std::to_string(dm));
  if (x.rows() < 1) throw UsageError("encode_modality: empty series");
  const Eigen::Index steps = x.rows();
  Matrix pre(steps, enc.kernel.cols());
  for (Eigen::Index t = 0; t < steps; ++t) {
    RowVector acc = enc.kernel_bias;
    for (int k = 0; k < kernel_width && t - k >= 0; ++k)
      acc += x.row(t - k) * enc.kernel.middleRows(static_cast<Eigen::Index>(k) * dm, dm);
    pre.row(t) = acc;
  }
  return pre;
}

Matrix relu(const Matrix& m) { return m.cwiseMax(0.0); }

}  // namespace

Matrix encode_modality(const ModalityEncoder& enc, int kernel_width, const Matrix& series) {
  return relu(conv_pre_activation(enc, kernel_width, series));
}

AttentionResult multi_head_attention(const ModalityEncoder& enc, int heads, const Matrix& hidden) {
  const auto h = static_cast<int>(enc.query.rows());
  if (hidden.cols() != h)
    throw ConfigError("multi_head_attention: input width " + std::to_string(hidden.cols()) +
                      " does not match hidden size " + std::to_string(h));
  if (heads < 1 || h % heads != 0)
    throw ConfigError("multi_head_attention: hidden size must be divisible by the head count");
  const int dk = h / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  AttentionResult r;
  r.heads_concat.resize(hidden.rows(), h);
  for (int j = 0; j < heads; ++j) {
    Matrix q = hidden * enc.query.middleCols(j * dk, dk);
    Matrix k = hidden * enc.key.middleCols(j * dk, dk);
    Matrix v = hidden * enc.value.middleCols(j * dk, dk);
    Matrix weights = nn::softmax_rows((q * k.transpose()) * scale);
    r.heads_concat.middleCols(j * dk, dk) = weights * v;
    r.q.push_back(std::move(q));
    r.k.push_back(std::move(k));
    r.v.push_back(std::move(v));
    r.weights.push_back(std::move(weights));
  }
  r.z = r.heads_concat * enc.output;
  return r;
}

Matrix concat_modalities(const std::vector<Matrix>& parts) {
  if (parts.empty()) throw UsageError("concat_modalities: no modalities");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows)
      throw UsageError("concat_modalities: modalities disagree on sequence length");
    cols += p.cols();
  }
  Matrix z(rows, cols);
  Eigen::Index offset = 0;
  for (const auto& p : parts) {
    z.middleCols(offset, p.cols()) = p;
    offset += p.cols();
  }
  return z;
}

FusedFeatures gate(const FusionParams& params, const Matrix& z) {
  if (z.cols() != params.gate_weight.cols())
    throw ConfigError("gate: Z has " + std::to_string(z.cols()) + " columns, gate expects " +
                      std::to_string(params.gate_weight.cols()));
  Matrix logits = z * params.gate_weight.transpose();
  logits.rowwise() += params.gate_bias;
  FusedFeatures out;
  out.gate = logits.unaryExpr([](double x) { return nn::sigmoid(x); });
  out.fused = out.gate.cwiseProduct(z);
  return out;
}

RowVector pool_state(const FusedFeatures& features) {
  if (features.fused.rows() < 1) throw UsageError("pool_state: empty feature matrix");
  return features.fused.row(features.fused.rows() - 1);
}

FusedFeatures fuse(const FusionParams& params, const std::vector<ModalitySeries>& series,
                   FusionTrace* trace) {
  if (static_cast<int>(series.size()) != params.n_modalities())
    throw ConfigError("fuse: got " + std::to_string(series.size()) + " modalities, expected " +
                      std::to_string(params.n_modalities()));
  FusionTrace local;
  FusionTrace& tr = trace ? *trace : local;
  tr = FusionTrace{};
  std::vector<Matrix> zs;
  for (std::size_t m = 0; m < series.size(); ++m) {
    const auto& enc = params.modalities[m];
    if (m > 0 && series[m].data.rows() != series[0].data.rows())
      throw UsageError("fuse: modalities disagree on sequence length");
    Matrix pre = conv_pre_activation(enc, params.kernel_width, series[m].data);
    Matrix hidden = relu(pre);
    AttentionResult att = multi_head_attention(enc, params.heads, hidden);
    zs.push_back(att.z);
    tr.inputs.push_back(series[m].data);
    tr.conv_pre.push_back(std::move(pre));
    tr.encoded.push_back(std::move(hidden));
    tr.attention.push_back(std::move(att));
  }
  tr.z = concat_modalities(zs);
  tr.out = gate(params, tr.z);
  return tr.out;
}

FusionParams fuse_backward(const FusionParams& params, const FusionTrace& trace,
                           const Matrix& d_fused) {
  const Matrix& z = trace.z;
  const Matrix& g = trace.out.gate;
  if (d_fused.rows() != z.rows() || d_fused.cols() != z.cols())
    throw ConfigError("fuse_backward: gradient shape does not match F");
  FusionParams grad = zeros_like(params);

  // F = G (.) Z,  G = sigmoid(A),  A = Z W_g^T + b_g
  Matrix dz = d_fused.cwiseProduct(g);
  const Matrix dg = d_fused.cwiseProduct(z);
  const Matrix da = dg.cwiseProduct(g.cwiseProduct((1.0 - g.array()).matrix()));
  grad.gate_weight = da.transpose() * z;
  grad.gate_bias = da.colwise().sum();
  dz += da * params.gate_weight;

  const int h = params.hidden();
  const int dk = params.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  const int w = params.kernel_width;

  for (int m = 0; m < params.n_modalities(); ++m) {
    const auto mu = static_cast<std::size_t>(m);
    const auto& enc = params.modalities[mu];
    auto& genc = grad.modalities[mu];
    const auto& att = trace.attention[mu];
    const Matrix& hidden = trace.encoded[mu];
    const Matrix dzm = dz.middleCols(static_cast<Eigen::Index>(m) * h, h);

    genc.output = att.heads_concat.transpose() * dzm;
    const Matrix dconcat = dzm * enc.output.transpose();

    Matrix dhidden = Matrix::Zero(hidden.rows(), h);
    for (int j = 0; j < params.heads; ++j) {
      const auto ju = static_cast<std::size_t>(j);
      const Matrix& p = att.weights[ju];
      const Matrix dout = dconcat.middleCols(j * dk, dk);
      const Matrix dp = dout * att.v[ju].transpose();
      const Matrix dv = p.transpose() * dout;
      // softmax backward, row-wise: dS = P (.) (dP - rowsum(dP (.) P))
      Matrix ds = p.cwiseProduct(dp);
      const Eigen::VectorXd rowdot = ds.rowwise().sum();
      ds = p.cwiseProduct(dp - rowdot.replicate(1, dp.cols()));
      ds *= scale;
      const Matrix dq = ds * att.k[ju];
      const Matrix dk_ = ds.transpose() * att.q[ju];
      genc.query.middleCols(j * dk, dk) = hidden.transpose() * dq;
      genc.key.middleCols(j * dk, dk) = hidden.transpose() * dk_;
      genc.value.middleCols(j * dk, dk) = hidden.transpose() * dv;
      dhidden += dq * enc.query.middleCols(j * dk, dk).transpose();
      dhidden += dk_ * enc.key.middleCols(j * dk, dk).transpose();
      dhidden += dv * enc.value.middleCols(j * dk, dk).transpose();
    }

    const Matrix& pre = trace.conv_pre[mu];
    const Matrix dpre = dhidden.cwiseProduct((pre.array() > 0.0).cast<double>().matrix());
    genc.kernel_bias = dpre.colwise().sum();
    const Matrix& x = trace.inputs[mu];
    const auto dm = static_cast<Eigen::Index>(x.cols());
    for (Eigen::Index t = 0; t < x.rows(); ++t)
      for (int k = 0; k < w && t - k >= 0; ++k)
        genc.kernel.middleRows(static_cast<Eigen::Index>(k) * dm, dm) +=
            x.row(t - k).transpose() * dpre.row(t);
  }
  return grad;
}

RowVector fuse_pooled(const FusionParams& params, const std::vector<ModalitySeries>& series) {
  return pool_state(fuse(params, series));
}

}  // namespace medgrpo::fusion
