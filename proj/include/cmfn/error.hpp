#pragma once

#include <stdexcept>
#include <string>

namespace cmfn {

// Library-wide error taxonomy. The C API maps these 1:1 onto cmfn_status
// codes; the CLI maps them onto its exit-code contract.
enum class ErrorCode {
  invalid,    // bad argument, bad config, bad call sequence
  shape,      // tensor shape mismatch
  numeric,    // NaN/Inf, degenerate distribution, diverged training
  io,         // file open/read/write failure
  format,     // unrecognized magic / malformed payload
  truncated,  // file ends mid-record
  version,    // format version not supported
  charset,    // charset in file disagrees with the built-in charset
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace cmfn
