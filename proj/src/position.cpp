#include "cmfn/position.hpp"

#include <cmath>

namespace cmfn {

Tensor sinusoid_1d(int64_t t, int64_t c) {
  if (t < 1) raise(ErrorCode::invalid, "sinusoid_1d: T must be >= 1");
  if (c < 2 || c % 2 != 0)
    raise(ErrorCode::invalid, "sinusoid_1d: channel count must be even");
  std::vector<double> v(static_cast<size_t>(t * c));
  for (int64_t pos = 0; pos < t; ++pos) {
    for (int64_t i = 0; 2 * i < c; ++i) {
      double rate = std::pow(10000.0, static_cast<double>(2 * i) /
                                          static_cast<double>(c));
      double angle = static_cast<double>(pos) / rate;
      v[pos * c + 2 * i] = std::sin(angle);
      v[pos * c + 2 * i + 1] = std::cos(angle);
    }
  }
  return Tensor::from_values({t, c}, std::move(v));
}

Tensor sinusoid_2d(int64_t h, int64_t w, int64_t c) {
  if (h < 1 || w < 1) raise(ErrorCode::invalid, "sinusoid_2d: empty grid");
  if (c < 4 || c % 4 != 0)
    raise(ErrorCode::invalid,
          "sinusoid_2d: channel count must be divisible by 4");
  int64_t half = c / 2;
  Tensor col_table = sinusoid_1d(w, half);
  Tensor row_table = sinusoid_1d(h, half);
  std::vector<double> v(static_cast<size_t>(h * w * c));
  for (int64_t r = 0; r < h; ++r) {
    for (int64_t col = 0; col < w; ++col) {
      double* cell = v.data() + (r * w + col) * c;
      for (int64_t j = 0; j < half; ++j) {
        cell[j] = col_table.values()[col * half + j];
        cell[half + j] = row_table.values()[r * half + j];
      }
    }
  }
  return Tensor::from_values({h * w, c}, std::move(v));
}

SEBlockParams SEBlockParams::create(ParamStore& store,
                                    const std::string& prefix, int64_t c) {
  if (c % kReduction != 0)
    raise(ErrorCode::invalid,
          "se_block: reduction must divide the channel count");
  int64_t mid = c / kReduction;
  SEBlockParams p;
  p.squeeze = store.add_glorot(prefix + ".squeeze", {c, mid}, c, mid);
  p.excite = store.add_glorot(prefix + ".excite", {mid, c}, mid, c);
  return p;
}

Tensor se_block(const Tensor& p, const SEBlockParams& params) {
  int64_t c = p.dim(-1);
  if (params.squeeze.dim(0) != c)
    raise(ErrorCode::shape, "se_block: table " + shape_str(p.shape()) +
                                " disagrees with squeeze " +
                                shape_str(params.squeeze.shape()));
  // squeeze: global average over positions, then the two 1×1 channel maps
  Tensor pooled = reshape(avg_pool_axis(p, 0), {1, c});
  Tensor hidden = relu(matmul(pooled, params.squeeze));
  Tensor gate = sigmoid(matmul(hidden, params.excite));
  return add(mul_broadcast_row(p, reshape(gate, {c})), p);
}

PSEParams PSEParams::create(ParamStore& store, const std::string& prefix,
                            int64_t c, int64_t heads) {
  if (heads < 1 || c % heads != 0)
    raise(ErrorCode::invalid, "position encoder: heads must divide C");
  PSEParams p;
  p.key_se = SEBlockParams::create(store, prefix + ".key_se", c);
  p.value_se = SEBlockParams::create(store, prefix + ".value_se", c);
  p.ln_gain = store.add_ones(prefix + ".ln_gain", {c});
  p.ln_bias = store.add_zeros(prefix + ".ln_bias", {c});
  p.heads = heads;
  return p;
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            int64_t heads, const Tensor& scores_extra) {
  int64_t c = q.dim(-1);
  if (k.dim(-1) != c || v.dim(-1) != c)
    raise(ErrorCode::shape, "attention: channel widths disagree");
  if (c % heads != 0)
    raise(ErrorCode::invalid, "attention: heads must divide the width");
  int64_t dh = c / heads;
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> outputs;
  outputs.reserve(static_cast<size_t>(heads));
  for (int64_t h = 0; h < heads; ++h) {
    Tensor qh = slice_last_axis(q, h * dh, dh);
    Tensor kh = slice_last_axis(k, h * dh, dh);
    Tensor vh = slice_last_axis(v, h * dh, dh);
    Tensor scores = scale(matmul(qh, transpose2d(kh)), inv_sqrt);
    if (scores_extra.defined()) scores = add(scores, scores_extra);
    outputs.push_back(matmul(softmax_last_axis(scores), vh));
  }
  return concat_last_axis(outputs);
}

Tensor position_self_enhance(const Tensor& p, const PSEParams& params) {
  Tensor key = se_block(p, params.key_se);
  Tensor value = se_block(p, params.value_se);
  Tensor attended = multi_head_attention(p, key, value, params.heads, Tensor());
  Tensor m_p = add(attended, p);  // residual add of the fixed table
  return layer_norm(m_p, params.ln_gain, params.ln_bias);
}

}  // namespace cmfn
