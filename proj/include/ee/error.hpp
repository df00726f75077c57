#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ee {

// Every failure raised by the library carries one of these kinds. The CLI maps
// them onto process exit codes (see exit_code()).
enum class ErrorKind {
  kShape,
  kConfig,
  kDomain,
  kRange,
  kFormat,
  kIntegrity,
  kVersion,
  kPairing,
  kRefusal,
  kPrecondition,
  kRemote,
  kProtocol,
  kPipeline,
  kIo,
  kUsage,
};

std::string_view kind_name(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(kind_name(kind)) + " error: " + what),
        kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

// Raised by remote judge calls after all retries are spent.
class RemoteError : public Error {
 public:
  RemoteError(const std::string& what, int retries)
      : Error(ErrorKind::kRemote,
              what + " (after " + std::to_string(retries) + " retries)"),
        retries_(retries) {}

  int retries() const { return retries_; }

 private:
  int retries_;
};

// Raised by container decoders; offset is the byte position where parsing
// failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(ErrorKind::kFormat,
              what + " at offset " + std::to_string(offset)),
        offset_(offset) {}

  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

//  0 success        2 usage       3 format     4 integrity
//  5 pairing        6 domain      7 shape/range/config/version
//  8 refusal/precondition         9 remote/protocol
// 10 pipeline      11 io
int exit_code(ErrorKind kind);

}  // namespace ee
