#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace coregen {

// All numerics run in 64-bit floats so finite-difference checks stay sharp.
using Scalar = double;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using IntMatrix = Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic>;
using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;
using TokenId = std::int32_t;

enum class ErrorCode {
  LineCountMismatch,
  EmptyLine,
  EmptyCorpus,
  UnknownId,
  WrongCategory,
  IdOutOfRange,
  SequenceTooLong,
  AllPadded,
  ShapeMismatch,
  IoFailure,
  VersionMismatch,
  WrongStageTag,
  NoLabels,
  LengthMismatch,
  EmptyInput,
  EmptyQuery,
  NumericFailure,
  InvalidConfig,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

const char* error_code_name(ErrorCode code);

}  // namespace coregen
