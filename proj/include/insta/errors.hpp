#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace insta {

// Base for every domain error raised by the library. The CLI maps these to
// exit code 1; anything else escaping a subcommand is a bug.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define INSTA_DEFINE_ERROR(Name)          \
  class Name : public Error {             \
   public:                                \
    using Error::Error;                   \
  }

// corpus
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};
INSTA_DEFINE_ERROR(SchemaError);
INSTA_DEFINE_ERROR(SplitError);
INSTA_DEFINE_ERROR(DuplicateIdError);
INSTA_DEFINE_ERROR(UnknownTaskError);
INSTA_DEFINE_ERROR(IoError);

// refine
class UnbalancedPlaceholderError : public Error {
 public:
  UnbalancedPlaceholderError(std::size_t pos, const std::string& what)
      : Error("byte " + std::to_string(pos) + ": " + what), pos_(pos) {}
  std::size_t position() const noexcept { return pos_; }

 private:
  std::size_t pos_;
};
INSTA_DEFINE_ERROR(ConfigError);

// embed
INSTA_DEFINE_ERROR(BackendUnavailableError);
INSTA_DEFINE_ERROR(DimensionMismatchError);
INSTA_DEFINE_ERROR(ZeroNormError);
INSTA_DEFINE_ERROR(ProtocolError);

// align
INSTA_DEFINE_ERROR(InsufficientPairsError);
INSTA_DEFINE_ERROR(DivergenceError);

// select
INSTA_DEFINE_ERROR(NoEligibleTasksError);
INSTA_DEFINE_ERROR(MissingInstancesError);
INSTA_DEFINE_ERROR(InsufficientOverlapError);

// mixture
INSTA_DEFINE_ERROR(UnresolvedPlaceholderError);
INSTA_DEFINE_ERROR(MissingExamplesError);

#undef INSTA_DEFINE_ERROR

}  // namespace insta
