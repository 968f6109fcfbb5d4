#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace imagegraph {

/// Base of every error thrown by the library. `exit_code()` is the CLI's
/// process status for the category (1 argument, 2 data, 3 internal).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 3; }
};

class ArgumentError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 1; }
};

class ShapeError : public ArgumentError {
 public:
  using ArgumentError::ArgumentError;
};

class DataError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

class IoError : public DataError {
 public:
  using DataError::DataError;
};

/// Raster decoding failure; `offset()` is the byte position where decoding stopped.
class DecodeError : public DataError {
 public:
  DecodeError(const std::string& what, std::size_t offset)
      : DataError(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Corrupt or truncated graph / checkpoint file.
class FormatError : public DataError {
 public:
  using DataError::DataError;
};

/// A feature provider could not resolve an (image id, segment id) key.
class ResolutionError : public DataError {
 public:
  ResolutionError(std::string image_id, std::size_t segment)
      : DataError("no feature vector for (\"" + image_id + "\", " + std::to_string(segment) + ")"),
        image_id_(std::move(image_id)),
        segment_(segment) {}
  const std::string& image_id() const noexcept { return image_id_; }
  std::size_t segment() const noexcept { return segment_; }

 private:
  std::string image_id_;
  std::size_t segment_;
};

/// A metric that is undefined for the given input (e.g. AUC with one class).
class UndefinedMetricError : public DataError {
 public:
  using DataError::DataError;
};

}  // namespace imagegraph
