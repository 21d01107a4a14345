#pragma once

#include <stdexcept>
#include <string>

namespace pmoe {

// Every failure raised by the library derives from Error so callers (the CLI in
// particular) can separate user mistakes from numeric/internal failures.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shapes that do not line up (matmul inner dims, mask vs map, ...).
class DimensionError : public Error {
public:
    using Error::Error;
};

// Out-of-range hyperparameters: k > E, non-positive temperature, ...
class ParameterError : public Error {
public:
    using Error::Error;
};

// Malformed caller input: image size mismatch, over-length prompt, ...
class InputError : public Error {
public:
    using Error::Error;
};

// Non-finite values encountered during evaluation of a function.
class EvaluationError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class DatasetError : public Error {
public:
    using Error::Error;
};

class ValidationError : public DatasetError {
public:
    using DatasetError::DatasetError;
};

class FormatError : public Error {
public:
    using Error::Error;
};

// Metric requested on data that does not define it (single-class AUROC, ...).
class UndefinedMetricError : public Error {
public:
    using Error::Error;
};

// Broken internal invariant; indicates a bug rather than bad input.
class InternalError : public Error {
public:
    using Error::Error;
};

}  // namespace pmoe
