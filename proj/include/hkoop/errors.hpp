/*
 Copyright 2026 The hkoop Authors

 Licensed under the Apache License, Version 2.0 (the "License");
 you may not use this file except in compliance with the License.
 You may obtain a copy of the License at

      https://www.apache.org/licenses/LICENSE-2.0

 Unless required by applicable law or agreed to in writing, software
 distributed under the License is distributed on an "AS IS" BASIS,
 WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 See the License for the specific language governing permissions and
 limitations under the License.
*/

#ifndef HKOOP_ERRORS_HPP
#define HKOOP_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace hkoop {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Caller supplied something the contract rejects (dimensions, ranges, empty grids).
class InvalidInput : public Error {
public:
  using Error::Error;
};

/// A file or config did not match the expected schema.
class SchemaError : public InvalidInput {
public:
  using InvalidInput::InvalidInput;
};

/// Enumeration or grid size exceeded a configured cap.
class DomainTooLarge : public InvalidInput {
public:
  using InvalidInput::InvalidInput;
};

/// Non-finite values appeared during a computation.
class NumericError : public Error {
public:
  using Error::Error;
};

/// A discrete value could not be recovered from its continuous encoding.
class RecoveryError : public NumericError {
public:
  using NumericError::NumericError;
};

} // namespace hkoop

#endif // HKOOP_ERRORS_HPP
