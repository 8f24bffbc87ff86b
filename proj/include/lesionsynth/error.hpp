#pragma once

#include <stdexcept>
#include <string>

namespace lesionsynth {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Malformed annotation input. Carries the 1-based line number.
class ParseError : public Error {
public:
  ParseError(std::size_t line, const std::string &what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

private:
  std::size_t line_;
};

class ImageError : public Error {
public:
  using Error::Error;
};

/// Binary file errors (bank and checkpoint files).
class FormatError : public Error {
public:
  using Error::Error;
};
class VersionMismatchError : public FormatError {
public:
  using FormatError::FormatError;
};
class ChecksumError : public FormatError {
public:
  using FormatError::FormatError;
};
/// Too short to even hold a checksum; still a checksum failure to callers.
class TruncatedError : public ChecksumError {
public:
  using ChecksumError::ChecksumError;
};

} // namespace lesionsynth
