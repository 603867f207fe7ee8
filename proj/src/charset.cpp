#include "cmfn/charset.hpp"

#include <cctype>

namespace cmfn {

const std::string& Charset::symbols() {
  static const std::string s = "abcdefghijklmnopqrstuvwxyz0123456789";
  return s;
}

int Charset::index_of(char c) {
  c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (c >= 'a' && c <= 'z') return c - 'a';
  if (c >= '0' && c <= '9') return 26 + (c - '0');
  raise(ErrorCode::charset,
        std::string("unsupported symbol '") + c + "', charset is [a-z0-9]");
}

char Charset::symbol_at(int index) {
  if (index < 0 || index >= kEndIndex)
    raise(ErrorCode::invalid, "symbol_at: index " + std::to_string(index) +
                                  " is not a drawable symbol");
  return symbols()[static_cast<size_t>(index)];
}

bool Charset::is_supported(char c) {
  c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9');
}

LabelSeq encode_label(const std::string& text, int64_t t) {
  if (t < 1) raise(ErrorCode::invalid, "encode_label: T must be >= 1");
  if (static_cast<int64_t>(text.size()) > t - 1) {
    raise(ErrorCode::invalid,
          "encode_label: text of length " + std::to_string(text.size()) +
              " exceeds T-1 = " + std::to_string(t - 1));
  }
  LabelSeq seq;
  seq.length = static_cast<int64_t>(text.size());
  seq.indices.assign(static_cast<size_t>(t), Charset::kEndIndex);
  for (size_t i = 0; i < text.size(); ++i)
    seq.indices[i] = Charset::index_of(text[i]);
  return seq;
}

std::string decode_greedy(const Tensor& probs) {
  if (probs.rank() != 2 || probs.dim(1) != Charset::kClassCount)
    raise(ErrorCode::shape, "decode_greedy: expects [T×" +
                                std::to_string(Charset::kClassCount) +
                                "], got " + shape_str(probs.shape()));
  int64_t t = probs.dim(0);
  int64_t cls = probs.dim(1);
  std::string out;
  const double* p = probs.values().data();
  for (int64_t r = 0; r < t; ++r) {
    int64_t best = 0;
    double best_v = p[r * cls];
    for (int64_t j = 1; j < cls; ++j) {
      if (p[r * cls + j] > best_v) {
        best_v = p[r * cls + j];
        best = j;
      }
    }
    if (best == Charset::kEndIndex) break;
    out.push_back(Charset::symbol_at(static_cast<int>(best)));
  }
  return out;
}

}  // namespace cmfn
