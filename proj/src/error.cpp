#include "ee/error.hpp"

namespace ee {

std::string_view kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kConfig: return "configuration";
    case ErrorKind::kDomain: return "domain";
    case ErrorKind::kRange: return "range";
    case ErrorKind::kFormat: return "format";
    case ErrorKind::kIntegrity: return "integrity";
    case ErrorKind::kVersion: return "version";
    case ErrorKind::kPairing: return "key/model pairing";
    case ErrorKind::kRefusal: return "refusal";
    case ErrorKind::kPrecondition: return "precondition";
    case ErrorKind::kRemote: return "remote";
    case ErrorKind::kProtocol: return "protocol";
    case ErrorKind::kPipeline: return "pipeline";
    case ErrorKind::kIo: return "I/O";
    case ErrorKind::kUsage: return "usage";
  }
  return "unknown";
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kUsage: return 2;
    case ErrorKind::kFormat: return 3;
    case ErrorKind::kIntegrity: return 4;
    case ErrorKind::kPairing: return 5;
    case ErrorKind::kDomain: return 6;
    case ErrorKind::kShape:
    case ErrorKind::kRange:
    case ErrorKind::kConfig:
    case ErrorKind::kVersion: return 7;
    case ErrorKind::kRefusal:
    case ErrorKind::kPrecondition: return 8;
    case ErrorKind::kRemote:
    case ErrorKind::kProtocol: return 9;
    case ErrorKind::kPipeline: return 10;
    case ErrorKind::kIo: return 11;
  }
  return 1;
}

}  // namespace ee
