#pragma once

#include <stdexcept>
#include <string>

namespace mstkd {

enum class ErrorKind {
  kConfig,
  kData,
  kDimension,
  kContract,
  kFormat,
  kDivergence,
  kMissingArtifact,
  kProtocol,
  kUnsupported,
  kDegenerateEmbedding,
};

const char* to_string(ErrorKind kind);

// All library failures derive from this type; the kind selects the CLI exit
// code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

#define MSTKD_DEFINE_ERROR(Name, Kind)                 \
  class Name : public Error {                          \
   public:                                             \
    explicit Name(const std::string& message)          \
        : Error(ErrorKind::Kind, message) {}           \
  };

MSTKD_DEFINE_ERROR(ConfigError, kConfig)
MSTKD_DEFINE_ERROR(DataError, kData)
MSTKD_DEFINE_ERROR(DimensionError, kDimension)
MSTKD_DEFINE_ERROR(ContractError, kContract)
MSTKD_DEFINE_ERROR(FormatError, kFormat)
MSTKD_DEFINE_ERROR(DivergenceError, kDivergence)
MSTKD_DEFINE_ERROR(MissingArtifactError, kMissingArtifact)
MSTKD_DEFINE_ERROR(ProtocolError, kProtocol)
MSTKD_DEFINE_ERROR(UnsupportedError, kUnsupported)
MSTKD_DEFINE_ERROR(DegenerateEmbeddingError, kDegenerateEmbedding)

#undef MSTKD_DEFINE_ERROR

// Process exit code for an error kind. 0 is reserved for success.
int exit_code(ErrorKind kind);

}  // namespace mstkd
