#pragma once

#include <stdexcept>
#include <string>

namespace efl {

enum class Errc {
  invalid_argument,
  shape_mismatch,
  annotation_incomplete,
  degenerate_annotation,
  empty_manifest,
  duplicate_key,
  split_mismatch,
  malformed_template,
  validation,
  transport,
  training_diverged,
  numeric,
  config,
  missing_prerequisite,
  io,
};

const char* errc_name(Errc code);

// Every failure raised by the library carries a category so the CLI can map
// it onto an exit code and tests can assert on the kind of failure.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

#define EFL_CHECK(cond, code, msg)                 \
  do {                                             \
    if (!(cond)) throw ::efl::Error((code), (msg)); \
  } while (0)

}  // namespace efl
