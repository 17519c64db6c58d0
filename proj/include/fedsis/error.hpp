// Copyright 2026 The fedsis Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace fedsis {

/// Library error carrying a short machine-readable kind ("shape", "layout",
/// "diverged", ...) next to a human-readable message.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& detail)
      : std::runtime_error(kind + ": " + detail), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

/// Raised when local training produces a non-finite loss.
class DivergenceError : public Error {
 public:
  DivergenceError(int site, int step, const std::string& detail)
      : Error("diverged", "site " + std::to_string(site) + " step " +
                              std::to_string(step) + ": " + detail),
        site_(site),
        step_(step) {}

  int site() const noexcept { return site_; }
  int step() const noexcept { return step_; }

 private:
  int site_;
  int step_;
};

}  // namespace fedsis
