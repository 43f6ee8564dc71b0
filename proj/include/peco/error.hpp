#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace peco {

enum class ErrorCode {
  kShape,
  kConfig,
  kBounds,
  kEvaluation,
  kIngestion,
  kManifestParse,
  kTruncatedBlob,
  kOffsetOverflow,
  kVersionMismatch,
  kFingerprint,
  kEmptyCodeword,
  kUndefinedLoss,
  kDiverged,
  kIo,
};

std::string_view to_string(ErrorCode code);

// Every failure surfaced by the library carries one of the codes above so
// callers (notably the CLI) can map them to exit statuses and diagnostics.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace peco
