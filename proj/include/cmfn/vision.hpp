#pragma once

#include <utility>

#include "cmfn/params.hpp"
#include "cmfn/tensor.hpp"

namespace cmfn {

// Everything the vision branch produces for one image; the language branch
// reads at_m, f_v and visual_logits from here on every iteration.
struct VisionOutput {
  Tensor v_r;            // (H/4)×(W/4)×C features
  Tensor k_r;            // same shape, attention keys
  Tensor at_m;           // T×S spatial attention, S = (H/4)·(W/4)
  Tensor f_v;            // T×C glimpse features
  Tensor visual_logits;  // T×cls
};

// Four 3×3 stages (stride 2,1,2,1; channels 3→C/2→C/2→C→C) standing in for
// the full-depth backbone while keeping the H/4×W/4×C output contract.
struct BackboneParams {
  Tensor k1, b1;  // 3     → C/2, stride 2
  Tensor k2, b2;  // C/2   → C/2
  Tensor k3, b3;  // C/2   → C,   stride 2
  Tensor k4, b4;  // C     → C

  static BackboneParams create(ParamStore& store, const std::string& prefix,
                               int64_t c);
};

Tensor backbone(const Tensor& image, const BackboneParams& params);

// Two-level encoder/decoder with additive skips; output shape equals input
// shape, all channels C.
struct MiniUNetParams {
  Tensor enc1_k, enc1_b;
  Tensor enc2_k, enc2_b;
  Tensor mid_k, mid_b;
  Tensor dec1_k, dec1_b;
  Tensor dec2_k, dec2_b;

  static MiniUNetParams create(ParamStore& store, const std::string& prefix,
                               int64_t c);
};

Tensor unet_keys(const Tensor& v, const MiniUNetParams& params);

// Per-character spatial attention over the key map and the glimpse features
// it induces. Queries and keys must share the channel width.
std::pair<Tensor, Tensor> spatial_attention(const Tensor& p_se,
                                            const Tensor& k_r,
                                            const Tensor& v_r);

struct VisualHeadParams {
  Tensor w;  // C × cls
  Tensor b;  // cls

  static VisualHeadParams create(ParamStore& store, const std::string& prefix,
                                 int64_t c, int64_t cls);
};

Tensor visual_predict(const Tensor& f_v, const VisualHeadParams& params);

struct VisionParams {
  BackboneParams backbone;
  MiniUNetParams unet;
  VisualHeadParams head;

  static VisionParams create(ParamStore& store, const std::string& prefix,
                             int64_t c, int64_t cls);
};

VisionOutput forward_vision(const Tensor& image, const Tensor& p_se,
                            const VisionParams& params);

// Stride-2 3×3 conv that halves each spatial extent exactly: even extents
// get a bottom/right zero pad, odd extents a symmetric one, so the output
// extent always divides.
Tensor downsample_conv(const Tensor& x, const Tensor& kernels,
                       const Tensor& bias);

}  // namespace cmfn
