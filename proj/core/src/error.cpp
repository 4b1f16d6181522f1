#include "mstkd/error.hpp"

namespace mstkd {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return "config error";
    case ErrorKind::kData: return "data error";
    case ErrorKind::kDimension: return "dimension error";
    case ErrorKind::kContract: return "contract error";
    case ErrorKind::kFormat: return "format error";
    case ErrorKind::kDivergence: return "divergence";
    case ErrorKind::kMissingArtifact: return "missing artifact";
    case ErrorKind::kProtocol: return "protocol error";
    case ErrorKind::kUnsupported: return "unsupported";
    case ErrorKind::kDegenerateEmbedding: return "degenerate embedding";
  }
  return "error";
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return 2;
    case ErrorKind::kData:
    case ErrorKind::kFormat:
    case ErrorKind::kProtocol:
    case ErrorKind::kDegenerateEmbedding: return 3;
    case ErrorKind::kDivergence: return 4;
    case ErrorKind::kMissingArtifact: return 5;
    case ErrorKind::kDimension:
    case ErrorKind::kContract:
    case ErrorKind::kUnsupported: return 6;
  }
  return 1;
}

}  // namespace mstkd
