#pragma once

#include <stdexcept>
#include <string>

namespace capalign {

// Base of every error raised by the library. Each subclass names one
// failure from the pipeline's contracts so callers can map it to an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or unreadable input files.
class IoError : public Error {
 public:
  using Error::Error;
};

class ParseError : public IoError {
 public:
  using IoError::IoError;
};

class EmptyCorpus : public Error {
 public:
  EmptyCorpus() : Error("no spans survive page exclusion") {}
};

class EmptyInput : public Error {
 public:
  using Error::Error;
};

class PadCollision : public Error {
 public:
  using Error::Error;
};

class BackendUnavailable : public Error {
 public:
  using Error::Error;
};

class EmptyResponse : public Error {
 public:
  using Error::Error;
};

class DegenerateEmbedding : public Error {
 public:
  DegenerateEmbedding() : Error("projection norm below 1e-12; cannot normalize") {}
};

class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

class DatasetTooSmall : public Error {
 public:
  using Error::Error;
};

class EmptyConcept : public Error {
 public:
  EmptyConcept() : Error("concept name is empty") {}
};

class DegenerateLabels : public Error {
 public:
  DegenerateLabels() : Error("labels are all-positive or all-negative; AUC undefined") {}
};

}  // namespace capalign
