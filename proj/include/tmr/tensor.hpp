// Copyright (c) 2026 The TMR-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace tmr {

/// Dense row-major real matrix. Vectors are 1×n rows, scalars 1×1.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised while building a computation graph (operand shapes disagree).
struct ShapeError : Error {
  using Error::Error;
};

/// Raised when a file on disk does not match the expected layout.
struct FormatError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct TrainingError : Error {
  using Error::Error;
};

inline std::string shape_str(const Matrix& m) {
  return "[" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + "]";
}

}  // namespace tmr
