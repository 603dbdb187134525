#pragma once

#include <stdexcept>
#include <string>

namespace poiattrib {

enum class ErrorKind {
  parse,            ///< malformed input file (carries a line number where known)
  duplicate_id,     ///< repeated POI id within one catalog
  empty_category,   ///< POI row with no categories
  unknown_category, ///< category id outside the vocabulary
  unknown_poi,      ///< POI id not present in the catalog
  validation,       ///< invalid argument or config value
  io,               ///< file missing / unreadable / unwritable
  corrupt,          ///< binary artifact truncated or malformed
  version_mismatch, ///< binary artifact written by an incompatible format version
  vocab_mismatch,   ///< artifact built against a different category vocabulary
  non_finite,       ///< NaN/inf encountered where a finite value is required
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string message)
      : std::runtime_error(std::move(message)), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace poiattrib
