#pragma once

#include <array>
#include <optional>
#include <string_view>

namespace neuropipe {

enum class LesionClass { Healthy, TumorHGG, TumorLGG, Alzheimer, MultipleSclerosis };
inline constexpr int kNumClasses = 5;
inline constexpr std::array<LesionClass, 5> kAllClasses = {
    LesionClass::Healthy, LesionClass::TumorHGG, LesionClass::TumorLGG, LesionClass::Alzheimer,
    LesionClass::MultipleSclerosis};

enum class SubRegion { TumorCore, EnhancingCore, NonEnhancingCore, Edema };
inline constexpr int kNumSubRegions = 4;
inline constexpr std::array<SubRegion, 4> kAllSubRegions = {
    SubRegion::TumorCore, SubRegion::EnhancingCore, SubRegion::NonEnhancingCore, SubRegion::Edema};

std::string_view class_name(LesionClass c);
std::optional<LesionClass> parse_class(std::string_view text);
std::string_view subregion_name(SubRegion s);
std::optional<SubRegion> parse_subregion(std::string_view text);

}  // namespace neuropipe
