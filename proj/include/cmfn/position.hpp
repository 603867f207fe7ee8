#pragma once

#include "cmfn/params.hpp"
#include "cmfn/tensor.hpp"

namespace cmfn {

// Fixed sinusoidal table, T×C: column 2i is sin(t / 10000^(2i/C)),
// column 2i+1 the matching cosine.
Tensor sinusoid_1d(int64_t t, int64_t c);

// Spatial table flattened row-major to (h·w)×C: channels [0,C/2) encode the
// column coordinate, channels [C/2,C) the row coordinate, each by the 1-D
// rule.
Tensor sinusoid_2d(int64_t h, int64_t w, int64_t c);

// Squeeze-excitation over the channel axis: global average over positions,
// two 1×1 channel maps with relu/sigmoid, multiplicative gate plus residual.
struct SEBlockParams {
  Tensor squeeze;  // C × C/r
  Tensor excite;   // C/r × C

  static constexpr int64_t kReduction = 4;
  static SEBlockParams create(ParamStore& store, const std::string& prefix,
                              int64_t c);
};

Tensor se_block(const Tensor& p, const SEBlockParams& params);

// Position self-enhanced encoder: Q is the fixed table, K and V come from
// two independent SE blocks, multi-head attention with residual add of the
// table, then layer norm.
struct PSEParams {
  SEBlockParams key_se;
  SEBlockParams value_se;
  Tensor ln_gain;  // C
  Tensor ln_bias;  // C
  int64_t heads = 8;

  static PSEParams create(ParamStore& store, const std::string& prefix,
                          int64_t c, int64_t heads);
};

Tensor position_self_enhance(const Tensor& p, const PSEParams& params);

// Scaled dot-product attention over channel-sliced heads; scores_extra (may
// be undefined) is added to every head's scores before the softmax.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            int64_t heads, const Tensor& scores_extra);

}  // namespace cmfn
