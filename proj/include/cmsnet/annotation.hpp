#pragma once

// LabelMe-style polygon annotations: parsing, layered rasterisation into
// class/instance masks, dataset statistics, and the procedural toy dataset.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cmsnet/image_io.hpp"
#include "cmsnet/sample.hpp"
#include "cmsnet/tensor.hpp"

namespace cmsnet {

struct Point {
  double x = 0;
  double y = 0;
  friend bool operator==(const Point&, const Point&) = default;
};

struct Polygon {
  std::vector<Point> points;
  std::string label;
  nlohmann::json extra = nlohmann::json::object();  // unknown per-shape fields, kept verbatim
};

/// "car-0" -> {"car", 0}; "road" -> {"road", none}.
struct LabelParts {
  std::string class_name;
  std::optional<int> instance;
  friend bool operator==(const LabelParts&, const LabelParts&) = default;
};

LabelParts split_label(std::string_view label);

struct AnnotationDocument {
  std::string image_path;
  std::vector<Polygon> shapes;
  // fillColor, lineColor, flags, imageData and anything else, never interpreted.
  nlohmann::json extra = nlohmann::json::object();
};

AnnotationDocument parse_annotation(std::string_view text);
std::string serialize_annotation(const AnnotationDocument& doc);
AnnotationDocument load_annotation(const std::filesystem::path& path);
void save_annotation(const AnnotationDocument& doc, const std::filesystem::path& path);

struct ClassInfo {
  std::string name;
  std::int32_t id = 0;
  int rank = 0;  // render order, higher drawn later
  std::array<std::uint8_t, 3> color{0, 0, 0};
  bool countable = false;  // instance-labelled "thing" class
};

class ClassTable {
 public:
  ClassTable(std::vector<ClassInfo> classes, std::int32_t background_id = 0,
             std::int32_t void_id = kVoidLabel);

  /// background < road < cone < bike < moto < car < truck < bus < animal < person
  static ClassTable full();
  /// full() minus the rare classes (bike, moto, bus, animal).
  static ClassTable evaluation();
  /// background, road, car, person.
  static ClassTable toy();

  static ClassTable from_json(std::string_view text);
  std::string to_json() const;

  const std::vector<ClassInfo>& classes() const { return classes_; }
  std::size_t size() const { return classes_.size(); }
  std::vector<std::string> names() const;
  const ClassInfo* find(std::string_view name) const;
  const ClassInfo& at(std::int32_t id) const;
  std::int32_t background_id() const { return background_; }
  std::int32_t void_id() const { return void_; }

 private:
  std::vector<ClassInfo> classes_;
  std::int32_t background_;
  std::int32_t void_;
};

/// Classes referenced by the document but missing from the table.
std::vector<std::string> unknown_classes(const AnnotationDocument& doc, const ClassTable& table);

struct RenderResult {
  LabelMap classes;                    // 1 x H x W
  std::vector<std::uint16_t> instances;  // per-shape id for countable classes, 0 elsewhere
  std::vector<std::string> warnings;
};

/// Fills polygons (even-odd, pixel-centre sampling) over the background in
/// ascending render rank; among equal ranks the later shape in the file wins.
RenderResult render_mask(const AnnotationDocument& doc, const ClassTable& table, std::size_t width,
                         std::size_t height);

Image8 colorize(const LabelMap& labels, const ClassTable& table, std::size_t b = 0);

struct ClassStats {
  std::string name;
  double pixel_percent = 0;  // mean over images of the class pixel share
  std::size_t occurrences = 0;  // instances for countable classes, images for stuff
};

std::vector<ClassStats> dataset_stats(std::span<const AnnotationDocument> docs,
                                      std::span<const LabelMap> masks, const ClassTable& table);
void write_stats_csv(std::ostream& os, const std::vector<ClassStats>& stats);

struct ToyDataset {
  std::vector<LabeledSample> samples;
  std::vector<AnnotationDocument> documents;
};

/// Seeded low-contrast off-road scenes: a curved track band over same-hue
/// ground plus 0-3 car/person obstacles. Masks come from the analytic shapes;
/// documents carry polygon approximations of the same shapes.
ToyDataset generate_toy(std::size_t count, std::size_t width, std::size_t height,
                        const ClassTable& classes, std::uint64_t seed);

}  // namespace cmsnet
