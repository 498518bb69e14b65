#pragma once

#include <stdexcept>
#include <string>

namespace tcil {

// Machine-parsable error codes. Every failure surfaced by the CLI is printed
// as a single line "<code>: <message>" before a nonzero exit.
enum class ErrorCode {
  input,
  config,
  protocol_config,
  state,
  io,
  checkpoint,
  resume,
  degenerate_weights,
  internal,
};

inline const char* error_code_name(ErrorCode c) {
  switch (c) {
    case ErrorCode::input: return "E_INPUT";
    case ErrorCode::config: return "E_CONFIG";
    case ErrorCode::protocol_config: return "E_PROTOCOL_CONFIG";
    case ErrorCode::state: return "E_STATE";
    case ErrorCode::io: return "E_IO";
    case ErrorCode::checkpoint: return "E_CHECKPOINT";
    case ErrorCode::resume: return "E_RESUME";
    case ErrorCode::degenerate_weights: return "E_DEGENERATE_WEIGHTS";
    case ErrorCode::internal: return "E_INTERNAL";
  }
  return "E_UNKNOWN";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const { return code_; }

  std::string line() const {
    return std::string(error_code_name(code_)) + ": " + what();
  }

 private:
  ErrorCode code_;
};

inline Error input_error(const std::string& m) { return Error(ErrorCode::input, m); }
inline Error config_error(const std::string& m) { return Error(ErrorCode::config, m); }
inline Error protocol_config_error(const std::string& m) { return Error(ErrorCode::protocol_config, m); }
inline Error state_error(const std::string& m) { return Error(ErrorCode::state, m); }
inline Error io_error(const std::string& m) { return Error(ErrorCode::io, m); }
inline Error checkpoint_error(const std::string& m) { return Error(ErrorCode::checkpoint, m); }
inline Error resume_error(const std::string& m) { return Error(ErrorCode::resume, m); }
inline Error degenerate_weights_error(const std::string& m) { return Error(ErrorCode::degenerate_weights, m); }
inline Error internal_error(const std::string& m) { return Error(ErrorCode::internal, m); }

}  // namespace tcil
