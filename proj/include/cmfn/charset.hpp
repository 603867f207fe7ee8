#pragma once

#include <string>
#include <vector>

#include "cmfn/error.hpp"
#include "cmfn/tensor.hpp"

namespace cmfn {

// 37-class charset: 26 case-insensitive letters, 10 digits, one end token.
// The end token carries the highest index and doubles as padding. The symbol
// order is part of the checkpoint format contract.
class Charset {
 public:
  static constexpr int kClassCount = 37;
  static constexpr int kEndIndex = 36;

  // the 36 drawable symbols in index order
  static const std::string& symbols();

  static int index_of(char c);       // charset error on unsupported symbols
  static char symbol_at(int index);  // valid for indices 0..35
  static bool is_supported(char c);
};

// Length-T class-index sequence: text indices, then the end token, then
// end-token padding up to T.
struct LabelSeq {
  std::vector<int64_t> indices;
  int64_t length = 0;  // effective text length, <= T-1

  int64_t t() const { return static_cast<int64_t>(indices.size()); }
};

LabelSeq encode_label(const std::string& text, int64_t t);

// Argmax per row, truncated at the first end token. Ties break to the
// lowest class index so decoding stays deterministic.
std::string decode_greedy(const Tensor& probs);

}  // namespace cmfn
