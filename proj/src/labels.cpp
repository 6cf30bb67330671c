#include "neuropipe/labels.hpp"

namespace neuropipe {

namespace {
constexpr std::array<std::string_view, 5> kClassNames = {"Healthy", "TumorHGG", "TumorLGG",
                                                          "Alzheimer", "MultipleSclerosis"};
constexpr std::array<std::string_view, 4> kSubRegionNames = {"tumor-core", "enhancing-core",
                                                              "non-enhancing-core", "edema"};
}  // namespace

std::string_view class_name(LesionClass c) { return kClassNames[static_cast<std::size_t>(c)]; }

std::optional<LesionClass> parse_class(std::string_view text) {
  for (std::size_t i = 0; i < kClassNames.size(); ++i)
    if (kClassNames[i] == text) return kAllClasses[i];
  return std::nullopt;
}

std::string_view subregion_name(SubRegion s) { return kSubRegionNames[static_cast<std::size_t>(s)]; }

std::optional<SubRegion> parse_subregion(std::string_view text) {
  for (std::size_t i = 0; i < kSubRegionNames.size(); ++i)
    if (kSubRegionNames[i] == text) return kAllSubRegions[i];
  return std::nullopt;
}

}  // namespace neuropipe
