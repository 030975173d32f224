#include "freqattack/error.hpp"

namespace freqattack {

std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::UnboundInput: return "UnboundInput";
    case ErrorKind::ForwardNotRun: return "ForwardNotRun";
    case ErrorKind::NonFiniteEvaluation: return "NonFiniteEvaluation";
    case ErrorKind::OddExtent: return "OddExtent";
    case ErrorKind::ZeroVector: return "ZeroVector";
    case ErrorKind::BatchTooSmall: return "BatchTooSmall";
    case ErrorKind::TargetIsSelf: return "TargetIsSelf";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::EmptyDataset: return "EmptyDataset";
    case ErrorKind::DivergedTraining: return "DivergedTraining";
    case ErrorKind::IoFailure: return "IoFailure";
    case ErrorKind::BadMagic: return "BadMagic";
    case ErrorKind::MalformedRecord: return "MalformedRecord";
    case ErrorKind::UnsupportedFormat: return "UnsupportedFormat";
    case ErrorKind::EmptyInput: return "EmptyInput";
  }
  return "Unknown";
}

}  // namespace freqattack
