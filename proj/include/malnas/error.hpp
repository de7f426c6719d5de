// Copyright 2026 The malnas Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace malnas {

// Base of every error the engine raises. Subclasses name the failure class
// so callers (the CLI in particular) can map them to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error { using Error::Error; };
class ParameterError : public Error { using Error::Error; };
class UsageError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };
class DegenerateStatsError : public Error { using Error::Error; };

// Search-space / configuration problems.
class SpecError : public Error { using Error::Error; };
class UnsupportedError : public Error { using Error::Error; };
class InfeasibleError : public Error { using Error::Error; };

// Input data problems.
class DataError : public Error { using Error::Error; };
class ParseError : public DataError {
 public:
  ParseError(const std::string& what, std::size_t row)
      : DataError(what + " (row " + std::to_string(row) + ")"), row_(row) {}
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};
class SchemaError : public DataError { using DataError::DataError; };

// Orchestration problems.
class ConfigError : public Error { using Error::Error; };
class DependencyError : public Error { using Error::Error; };
class StalenessError : public Error { using Error::Error; };

}  // namespace malnas
