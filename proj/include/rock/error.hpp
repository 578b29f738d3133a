#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace rock {

enum class ErrorKind {
  OverlappingPartSets,
  GapInPartIds,
  EmptyPartSet,
  InvalidCatalog,
  LabelCategoryMismatch,
  ParseError,
  ShapeMismatch,
  ChannelMismatch,
  MissingAdversarialLabels,
  TargetLabelsRequired,
  LabelOutOfRange,
  EmptyDataset,
  UnsatisfiableLayout,
  InvalidArgument,
  CatalogHashMismatch,
  FormatError,
  IoError,
};

std::string_view to_string(ErrorKind kind);

/// Every failure surfaced by the library. The kind is stable and is what the
/// CLI maps onto exit codes; the message is for humans.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

}  // namespace rock
