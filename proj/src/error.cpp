#include "neuropipe/error.hpp"

namespace neuropipe {

std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::UnknownFormat: return "UnknownFormat";
    case Errc::CorruptHeader: return "CorruptHeader";
    case Errc::NonFiniteData: return "NonFiniteData";
    case Errc::IoFailure: return "IoFailure";
    case Errc::IndexOutOfRange: return "IndexOutOfRange";
    case Errc::VoiOutOfBounds: return "VoiOutOfBounds";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::DuplicateModality: return "DuplicateModality";
    case Errc::ProvenanceMismatch: return "ProvenanceMismatch";
    case Errc::NonPositiveFactor: return "NonPositiveFactor";
    case Errc::DegenerateOutput: return "DegenerateOutput";
    case Errc::WindowTooLarge: return "WindowTooLarge";
    case Errc::RoiOutOfBounds: return "RoiOutOfBounds";
    case Errc::RoiTooSmall: return "RoiTooSmall";
    case Errc::BadLabel: return "BadLabel";
    case Errc::NegativeWeight: return "NegativeWeight";
    case Errc::BadConfig: return "BadConfig";
    case Errc::WrongChannels: return "WrongChannels";
    case Errc::WrongSize: return "WrongSize";
    case Errc::EmptyDataset: return "EmptyDataset";
    case Errc::DivergedLoss: return "DivergedLoss";
    case Errc::MissingTruth: return "MissingTruth";
    case Errc::EmptySubset: return "EmptySubset";
    case Errc::LengthMismatch: return "LengthMismatch";
    case Errc::UndefinedMetric: return "UndefinedMetric";
    case Errc::SpecInfeasible: return "SpecInfeasible";
    case Errc::ParseError: return "ParseError";
  }
  return "Unknown";
}

}  // namespace neuropipe
