#include "rock/error.hpp"

namespace rock {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::OverlappingPartSets: return "OverlappingPartSets";
    case ErrorKind::GapInPartIds: return "GapInPartIds";
    case ErrorKind::EmptyPartSet: return "EmptyPartSet";
    case ErrorKind::InvalidCatalog: return "InvalidCatalog";
    case ErrorKind::LabelCategoryMismatch: return "LabelCategoryMismatch";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::ChannelMismatch: return "ChannelMismatch";
    case ErrorKind::MissingAdversarialLabels: return "MissingAdversarialLabels";
    case ErrorKind::TargetLabelsRequired: return "TargetLabelsRequired";
    case ErrorKind::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorKind::EmptyDataset: return "EmptyDataset";
    case ErrorKind::UnsatisfiableLayout: return "UnsatisfiableLayout";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::CatalogHashMismatch: return "CatalogHashMismatch";
    case ErrorKind::FormatError: return "FormatError";
    case ErrorKind::IoError: return "IoError";
  }
  return "Unknown";
}

}  // namespace rock
