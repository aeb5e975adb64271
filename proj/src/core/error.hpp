#pragma once

#include <stdexcept>
#include <string>

namespace mwpgen {

// Maps one-to-one onto the CLI exit codes.
enum class ErrorKind { usage = 2, data = 3, numerical = 4 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message, std::string context = {})
      : std::runtime_error(message), kind_(kind), context_(std::move(context)) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& context() const noexcept { return context_; }

 private:
  ErrorKind kind_;
  std::string context_;
};

[[noreturn]] inline void fail_usage(const std::string& msg, std::string ctx = {}) {
  throw Error(ErrorKind::usage, msg, std::move(ctx));
}
[[noreturn]] inline void fail_data(const std::string& msg, std::string ctx = {}) {
  throw Error(ErrorKind::data, msg, std::move(ctx));
}
[[noreturn]] inline void fail_numerical(const std::string& msg, std::string ctx = {}) {
  throw Error(ErrorKind::numerical, msg, std::move(ctx));
}

}  // namespace mwpgen
