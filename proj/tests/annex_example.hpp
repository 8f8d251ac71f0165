#pragma once

// The LabelMe listing with its elided points ("...") dropped and trailing
// commas removed so it is valid JSON.

namespace cmsnet::test {

inline constexpr const char* kAnnexJson = R"({
  "fillColor": [255, 0, 0, 128],
  "imageData": "image-hash",
  "flags": {},
  "shapes": [
    {"points": [[233,134],[568,78],[56,687]], "label": "road"},
    {"points": [[345,34],[34,58],[543,234]], "label": "car-0"},
    {"points": [[235,122],[34,453],[56,987]], "label": "person-0"},
    {"points": [[346,45],[568,124],[234,12]], "label": "person-1"}
  ],
  "imagePath": "image_name.png",
  "lineColor": [255, 0, 0, 128]
})";

}  // namespace cmsnet::test
