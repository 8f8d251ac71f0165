#pragma once

#include <string>
#include <string_view>

#include "cmsnet/error.hpp"
#include "cmsnet/tensor.hpp"

namespace cmsnet {

enum class Condition { daytime, rainy, night, evening, dusty, synthetic };

inline std::string to_string(Condition c) {
  switch (c) {
    case Condition::daytime: return "daytime";
    case Condition::rainy: return "rainy";
    case Condition::night: return "night";
    case Condition::evening: return "evening";
    case Condition::dusty: return "dusty";
    case Condition::synthetic: return "synthetic";
  }
  return "?";
}

inline Condition parse_condition(std::string_view s) {
  for (auto c : {Condition::daytime, Condition::rainy, Condition::night, Condition::evening,
                 Condition::dusty, Condition::synthetic})
    if (to_string(c) == s) return c;
  throw ConfigError("unknown condition tag '" + std::string(s) + "'");
}

/// One image (batch of 1) with its per-pixel class mask.
struct LabeledSample {
  Tensor image;
  LabelMap mask;
  Condition condition = Condition::daytime;
};

}  // namespace cmsnet
