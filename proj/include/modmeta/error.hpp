#pragma once

#include <stdexcept>
#include <string>

namespace modmeta {

// Every failure raised by the library derives from Error so callers can
// catch the whole family at a boundary (the CLI does exactly that).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define MODMETA_DEFINE_ERROR(Name)            \
  class Name : public Error {                 \
   public:                                    \
    using Error::Error;                       \
  }

MODMETA_DEFINE_ERROR(ShapeError);
MODMETA_DEFINE_ERROR(ConfigError);
MODMETA_DEFINE_ERROR(NumericError);
MODMETA_DEFINE_ERROR(LookupError);
MODMETA_DEFINE_ERROR(DomainError);
MODMETA_DEFINE_ERROR(CapacityError);
MODMETA_DEFINE_ERROR(VersionError);
MODMETA_DEFINE_ERROR(IngestError);
MODMETA_DEFINE_ERROR(DegenerateDataError);
MODMETA_DEFINE_ERROR(IoError);

#undef MODMETA_DEFINE_ERROR

// Malformed serialized input; carries the byte offset where parsing stopped.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t position)
      : Error(what + " (at byte " + std::to_string(position) + ")"),
        position_(position) {}

  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

}  // namespace modmeta
