#pragma once
// Error taxonomy. Everything thrown by the library derives from fuselab::error;
// the CLI maps the four run-level errors to exit codes (config=2, training=3,
// audit=4, format=5) and anything else to 1.

#include <stdexcept>
#include <string>

namespace fuselab {

class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Contract-level errors (bad arguments, violated preconditions).
class shape_error : public error {
 public:
  using error::error;
};
class contract_error : public error {
 public:
  using error::error;
};
class vocab_error : public error {
 public:
  using error::error;
};
class length_error : public error {
 public:
  using error::error;
};
class kind_error : public error {
 public:
  using error::error;
};
class range_error : public error {
 public:
  using error::error;
};
class numeric_error : public error {
 public:
  using error::error;
};

// Run-level errors with dedicated CLI exit codes.
class config_error : public error {
 public:
  using error::error;
};
class training_error : public error {
 public:
  using error::error;
};
class audit_error : public error {
 public:
  using error::error;
};
class format_error : public error {
 public:
  using error::error;
};

}  // namespace fuselab
