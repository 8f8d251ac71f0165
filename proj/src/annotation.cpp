#include "cmsnet/annotation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "cmsnet/error.hpp"
#include "cmsnet/rng.hpp"

namespace cmsnet {

using nlohmann::json;

LabelParts split_label(std::string_view label) {
  const auto dash = label.rfind('-');
  if (dash != std::string_view::npos && dash > 0 && dash + 1 < label.size()) {
    const auto digits = label.substr(dash + 1);
    if (std::all_of(digits.begin(), digits.end(), [](unsigned char c) { return std::isdigit(c); })) {
      return {std::string(label.substr(0, dash)), std::stoi(std::string(digits))};
    }
  }
  return {std::string(label), std::nullopt};
}

AnnotationDocument parse_annotation(std::string_view text) {
  json j;
  try {
    j = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw ParseError("annotation JSON is malformed at byte " + std::to_string(e.byte) + ": " +
                     e.what());
  }
  if (!j.is_object()) throw ParseError("annotation root must be a JSON object");
  if (!j.contains("shapes") || !j["shapes"].is_array()) {
    throw ParseError("annotation is missing the \"shapes\" array");
  }
  AnnotationDocument doc;
  doc.image_path = j.value("imagePath", std::string{});
  const auto& shapes = j["shapes"];
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto& s = shapes[i];
    if (!s.is_object() || !s.contains("points") || !s.contains("label")) {
      throw ParseError("shape " + std::to_string(i) + " needs \"points\" and \"label\"");
    }
    Polygon poly;
    poly.label = s["label"].get<std::string>();
    for (const auto& p : s["points"]) {
      if (!p.is_array() || p.size() != 2) {
        throw ParseError("shape " + std::to_string(i) + " has a point that is not [x, y]");
      }
      poly.points.push_back({p[0].get<double>(), p[1].get<double>()});
    }
    if (poly.points.size() < 3) {
      throw ValidationError("shape " + std::to_string(i) + " ('" + poly.label + "') has " +
                            std::to_string(poly.points.size()) + " points, need at least 3");
    }
    for (const auto& [key, value] : s.items())
      if (key != "points" && key != "label") poly.extra[key] = value;
    doc.shapes.push_back(std::move(poly));
  }
  for (const auto& [key, value] : j.items())
    if (key != "shapes" && key != "imagePath") doc.extra[key] = value;
  return doc;
}

std::string serialize_annotation(const AnnotationDocument& doc) {
  json j = doc.extra;
  json shapes = json::array();
  for (const auto& s : doc.shapes) {
    json shape = s.extra;
    json pts = json::array();
    for (const auto& p : s.points) pts.push_back({p.x, p.y});
    shape["points"] = std::move(pts);
    shape["label"] = s.label;
    shapes.push_back(std::move(shape));
  }
  j["shapes"] = std::move(shapes);
  j["imagePath"] = doc.image_path;
  return j.dump(2);
}

AnnotationDocument load_annotation(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open annotation " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_annotation(ss.str());
  } catch (const Error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void save_annotation(const AnnotationDocument& doc, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream(path) << serialize_annotation(doc) << '\n';
}

// ---------------------------------------------------------------------------
// ClassTable

ClassTable::ClassTable(std::vector<ClassInfo> classes, std::int32_t background_id,
                       std::int32_t void_id)
    : classes_(std::move(classes)), background_(background_id), void_(void_id) {
  std::set<int> ranks;
  for (std::size_t i = 0; i < classes_.size(); ++i) {
    if (classes_[i].id != static_cast<std::int32_t>(i)) {
      throw ConfigError("class ids must be dense from 0; '" + classes_[i].name + "' has id " +
                        std::to_string(classes_[i].id));
    }
    if (!ranks.insert(classes_[i].rank).second) {
      throw ConfigError("duplicate render rank " + std::to_string(classes_[i].rank));
    }
  }
  if (background_ < 0 || background_ >= static_cast<std::int32_t>(classes_.size())) {
    throw ConfigError("background id outside the class table");
  }
  if (void_ >= 0 && void_ < static_cast<std::int32_t>(classes_.size())) {
    throw ConfigError("void id collides with a class id");
  }
}

namespace {

struct DefaultClass {
  const char* name;
  std::array<std::uint8_t, 3> color;
  bool countable;
  bool rare;
};

// Render order is the array order.
constexpr std::array<DefaultClass, 10> kDefaultClasses = {{
    {"background", {0, 0, 0}, false, false},
    {"road", {128, 64, 128}, false, false},
    {"cone", {250, 170, 30}, true, false},
    {"bike", {119, 11, 32}, true, true},
    {"moto", {0, 0, 230}, true, true},
    {"car", {0, 0, 142}, true, false},
    {"truck", {0, 0, 70}, true, false},
    {"bus", {0, 60, 100}, true, true},
    {"animal", {152, 251, 152}, true, true},
    {"person", {220, 20, 60}, true, false},
}};

ClassTable make_table(bool (*keep)(const DefaultClass&)) {
  std::vector<ClassInfo> out;
  int rank = 0;
  for (const auto& c : kDefaultClasses) {
    ++rank;
    if (!keep(c)) continue;
    out.push_back({c.name, static_cast<std::int32_t>(out.size()), rank, c.color, c.countable});
  }
  return ClassTable(std::move(out));
}

}  // namespace

ClassTable ClassTable::full() {
  return make_table([](const DefaultClass&) { return true; });
}

ClassTable ClassTable::evaluation() {
  return make_table([](const DefaultClass& c) { return !c.rare; });
}

ClassTable ClassTable::toy() {
  return make_table([](const DefaultClass& c) {
    const std::string_view n = c.name;
    return n == "background" || n == "road" || n == "car" || n == "person";
  });
}

ClassTable ClassTable::from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("class table JSON: ") + e.what());
  }
  std::vector<ClassInfo> classes;
  const auto& arr = j.at("classes");
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const auto& c = arr[i];
    ClassInfo info;
    info.name = c.at("name").get<std::string>();
    info.id = c.value("id", static_cast<std::int32_t>(i));
    info.rank = c.value("rank", static_cast<int>(i));
    if (c.contains("color")) {
      const auto col = c["color"].get<std::vector<int>>();
      if (col.size() != 3) throw ConfigError("class color must have 3 components");
      for (int k = 0; k < 3; ++k) info.color[k] = static_cast<std::uint8_t>(col[k]);
    }
    info.countable = c.value("countable", false);
    classes.push_back(std::move(info));
  }
  std::sort(classes.begin(), classes.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return ClassTable(std::move(classes), j.value("background_id", 0), j.value("void_id", kVoidLabel));
}

std::string ClassTable::to_json() const {
  json arr = json::array();
  for (const auto& c : classes_) {
    arr.push_back({{"name", c.name},
                   {"id", c.id},
                   {"rank", c.rank},
                   {"color", {c.color[0], c.color[1], c.color[2]}},
                   {"countable", c.countable}});
  }
  return json{{"classes", arr}, {"background_id", background_}, {"void_id", void_}}.dump(2);
}

std::vector<std::string> ClassTable::names() const {
  std::vector<std::string> out;
  for (const auto& c : classes_) out.push_back(c.name);
  return out;
}

const ClassInfo* ClassTable::find(std::string_view name) const {
  for (const auto& c : classes_)
    if (c.name == name) return &c;
  return nullptr;
}

const ClassInfo& ClassTable::at(std::int32_t id) const {
  if (id < 0 || id >= static_cast<std::int32_t>(classes_.size())) {
    throw ValidationError("class id " + std::to_string(id) + " not in the class table");
  }
  return classes_[static_cast<std::size_t>(id)];
}

std::vector<std::string> unknown_classes(const AnnotationDocument& doc, const ClassTable& table) {
  std::vector<std::string> out;
  for (const auto& s : doc.shapes) {
    auto name = split_label(s.label).class_name;
    if (!table.find(name) && std::find(out.begin(), out.end(), name) == out.end()) {
      out.push_back(std::move(name));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rasterisation

namespace {

// Calls fill(x) for every pixel of row `y` whose centre lies inside the
// polygon under the even-odd rule.
template <class Fn>
void scan_row(const std::vector<Point>& pts, std::size_t y, std::size_t width, std::vector<double>& xs,
              Fn&& fill) {
  const double yc = static_cast<double>(y) + 0.5;
  xs.clear();
  for (std::size_t i = 0, j = pts.size() - 1; i < pts.size(); j = i++) {
    const Point& a = pts[j];
    const Point& b = pts[i];
    if ((a.y <= yc) != (b.y <= yc)) {
      xs.push_back(a.x + (yc - a.y) * (b.x - a.x) / (b.y - a.y));
    }
  }
  std::sort(xs.begin(), xs.end());
  for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
    // Pixel centre x + 0.5 in [xs[k], xs[k+1]).
    const double lo = std::ceil(xs[k] - 0.5);
    const double hi = std::ceil(xs[k + 1] - 0.5);
    const auto x0 = static_cast<long>(std::max(lo, 0.0));
    const auto x1 = static_cast<long>(std::min(hi, static_cast<double>(width)));
    for (long x = x0; x < x1; ++x) fill(static_cast<std::size_t>(x));
  }
}

}  // namespace

RenderResult render_mask(const AnnotationDocument& doc, const ClassTable& table, std::size_t width,
                         std::size_t height) {
  if (width == 0 || height == 0) throw ConfigError("render_mask: canvas dims must be positive");
  RenderResult r{LabelMap(1, height, width, table.background_id()),
                 std::vector<std::uint16_t>(width * height, 0),
                 {}};
  struct Item {
    std::size_t index;
    const ClassInfo* cls;
  };
  std::vector<Item> items;
  for (std::size_t i = 0; i < doc.shapes.size(); ++i) {
    const auto parts = split_label(doc.shapes[i].label);
    const ClassInfo* cls = table.find(parts.class_name);
    if (!cls) {
      r.warnings.push_back("shape " + std::to_string(i) + ": unknown class '" + parts.class_name +
                           "' not rendered");
      continue;
    }
    items.push_back({i, cls});
  }
  std::stable_sort(items.begin(), items.end(),
                   [](const Item& a, const Item& b) { return a.cls->rank < b.cls->rank; });

  std::uint16_t next_instance = 0;
  std::vector<double> xs;
  for (const auto& item : items) {
    const auto& pts = doc.shapes[item.index].points;
    double min_x = pts[0].x, max_x = pts[0].x, min_y = pts[0].y, max_y = pts[0].y;
    for (const auto& p : pts) {
      min_x = std::min(min_x, p.x);
      max_x = std::max(max_x, p.x);
      min_y = std::min(min_y, p.y);
      max_y = std::max(max_y, p.y);
    }
    if (max_x <= 0 || max_y <= 0 || min_x >= static_cast<double>(width) ||
        min_y >= static_cast<double>(height)) {
      r.warnings.push_back("shape " + std::to_string(item.index) + " ('" +
                           doc.shapes[item.index].label + "') lies outside the canvas");
      continue;
    }
    const std::uint16_t instance = item.cls->countable ? ++next_instance : 0;
    const auto y0 = static_cast<std::size_t>(std::max(0.0, std::floor(min_y)));
    const auto y1 = std::min(height, static_cast<std::size_t>(std::ceil(max_y)) + 1);
    for (std::size_t y = y0; y < y1; ++y) {
      scan_row(pts, y, width, xs, [&](std::size_t x) {
        r.classes.at(0, y, x) = item.cls->id;
        r.instances[y * width + x] = instance;
      });
    }
  }
  return r;
}

Image8 colorize(const LabelMap& labels, const ClassTable& table, std::size_t b) {
  Image8 img{labels.w, labels.h, 3, std::vector<std::uint8_t>(labels.w * labels.h * 3, 0)};
  for (std::size_t y = 0; y < labels.h; ++y)
    for (std::size_t x = 0; x < labels.w; ++x) {
      const auto id = labels.at(b, y, x);
      if (id < 0 || id >= static_cast<std::int32_t>(table.size())) continue;  // void stays black
      const auto& c = table.at(id).color;
      std::copy(c.begin(), c.end(), img.pixels.begin() + static_cast<long>((y * labels.w + x) * 3));
    }
  return img;
}

// ---------------------------------------------------------------------------
// Statistics

std::vector<ClassStats> dataset_stats(std::span<const AnnotationDocument> docs,
                                      std::span<const LabelMap> masks, const ClassTable& table) {
  std::vector<ClassStats> out;
  for (const auto& c : table.classes()) out.push_back({c.name, 0.0, 0});
  if (masks.empty()) return out;
  for (const auto& m : masks) {
    std::vector<std::size_t> counts(table.size(), 0);
    for (auto v : m.labels)
      if (v >= 0 && v < static_cast<std::int32_t>(table.size())) ++counts[static_cast<std::size_t>(v)];
    const double total = static_cast<double>(m.size());
    for (std::size_t c = 0; c < table.size(); ++c) {
      out[c].pixel_percent += 100.0 * static_cast<double>(counts[c]) / total;
      if (!table.classes()[c].countable && counts[c] > 0) ++out[c].occurrences;
    }
  }
  for (auto& s : out) s.pixel_percent /= static_cast<double>(masks.size());
  for (const auto& doc : docs) {
    std::set<std::pair<std::string, int>> seen;
    for (const auto& shape : doc.shapes) {
      const auto parts = split_label(shape.label);
      const ClassInfo* cls = table.find(parts.class_name);
      if (!cls || !cls->countable) continue;
      // Unnumbered labels of a countable class are each their own instance.
      const int inst = parts.instance.value_or(-1 - static_cast<int>(seen.size()));
      if (seen.insert({parts.class_name, inst}).second) ++out[static_cast<std::size_t>(cls->id)].occurrences;
    }
  }
  return out;
}

void write_stats_csv(std::ostream& os, const std::vector<ClassStats>& stats) {
  const auto flags = os.flags();
  const auto prec = os.precision();
  os.setf(std::ios::fixed);
  os.precision(4);
  os << "class,pixel_percent,occurrences\n";
  for (const auto& s : stats) os << s.name << ',' << s.pixel_percent << ',' << s.occurrences << '\n';
  os.flags(flags);
  os.precision(prec);
}

// ---------------------------------------------------------------------------
// Toy dataset

namespace {

struct Track {
  double top = 0;
  double x_top = 0;
  double x_bottom = 0;
  double bend = 0;
  double half_top = 0;
  double half_bottom = 0;
  double height = 0;

  double t(double y) const { return std::clamp((y - top) / (height - top), 0.0, 1.0); }
  double center(double y) const {
    const double s = t(y);
    return x_top + (x_bottom - x_top) * s + bend * std::sin(std::numbers::pi * s);
  }
  double half(double y) const {
    const double s = t(y);
    return half_top + (half_bottom - half_top) * s;
  }
  bool contains(double x, double y) const {
    return y >= top && std::abs(x - center(y)) < half(y);
  }
};

struct Obstacle {
  bool person = false;
  double cx = 0, cy = 0;  // centre
  double rx = 0, ry = 0;  // half extents (rectangle for cars, radii for people)
  std::array<float, 3> color{};

  bool contains(double x, double y) const {
    if (person) {
      const double dx = (x - cx) / rx, dy = (y - cy) / ry;
      return dx * dx + dy * dy < 1.0;
    }
    return x >= cx - rx && x < cx + rx && y >= cy - ry && y < cy + ry;
  }

  std::vector<Point> polygon() const {
    if (!person) return {{cx - rx, cy - ry}, {cx + rx, cy - ry}, {cx + rx, cy + ry}, {cx - rx, cy + ry}};
    std::vector<Point> pts;
    constexpr int kVertices = 48;
    for (int k = 0; k < kVertices; ++k) {
      const double a = 2.0 * std::numbers::pi * k / kVertices;
      pts.push_back({cx + rx * std::cos(a), cy + ry * std::sin(a)});
    }
    return pts;
  }
};

// Bilinearly interpolated lattice noise in [0, 1].
class ValueNoise {
 public:
  ValueNoise(std::mt19937_64& rng, std::size_t cells_x, std::size_t cells_y)
      : nx_(cells_x + 2), ny_(cells_y + 2), values_(nx_ * ny_) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& v : values_) v = u(rng);
  }
  double at(double fx, double fy) const {  // fx, fy in cell units
    const auto x0 = static_cast<std::size_t>(fx), y0 = static_cast<std::size_t>(fy);
    const double tx = fx - static_cast<double>(x0), ty = fy - static_cast<double>(y0);
    const double sx = tx * tx * (3 - 2 * tx), sy = ty * ty * (3 - 2 * ty);
    auto v = [&](std::size_t x, std::size_t y) { return values_[std::min(y, ny_ - 1) * nx_ + std::min(x, nx_ - 1)]; };
    const double a = v(x0, y0) + (v(x0 + 1, y0) - v(x0, y0)) * sx;
    const double b = v(x0, y0 + 1) + (v(x0 + 1, y0 + 1) - v(x0, y0 + 1)) * sx;
    return a + (b - a) * sy;
  }

 private:
  std::size_t nx_, ny_;
  std::vector<double> values_;
};

std::int32_t require_class(const ClassTable& table, const char* name) {
  const ClassInfo* c = table.find(name);
  if (!c) throw ConfigError(std::string("toy generator needs a '") + name + "' class");
  return c->id;
}

}  // namespace

ToyDataset generate_toy(std::size_t count, std::size_t width, std::size_t height,
                        const ClassTable& classes, std::uint64_t seed) {
  if (count < 1) throw ConfigError("generate_toy: count must be >= 1");
  if (width < 24 || height < 16) {
    throw ConfigError("generate_toy: canvas " + std::to_string(width) + "x" +
                      std::to_string(height) + " is too small for the track band (min 24x16)");
  }
  const std::int32_t road_id = require_class(classes, "road");
  const std::int32_t car_id = require_class(classes, "car");
  const std::int32_t person_id = require_class(classes, "person");
  const std::int32_t bg_id = classes.background_id();
  const auto W = static_cast<double>(width), H = static_cast<double>(height);

  ToyDataset out;
  for (std::size_t i = 0; i < count; ++i) {
    std::mt19937_64 rng(derive_seed(seed, {i}));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto uni = [&](double a, double b) { return a + (b - a) * u(rng); };

    Track track;
    track.height = H;
    track.top = H * uni(0.25, 0.35);
    track.x_bottom = W * uni(0.40, 0.60);
    track.x_top = W * uni(0.35, 0.65);
    track.bend = W * uni(-0.08, 0.08);
    track.half_top = W * uni(0.08, 0.12);
    track.half_bottom = W * uni(0.28, 0.36);

    std::vector<Obstacle> obstacles;
    const int n_obstacles = static_cast<int>(rng() % 4);
    for (int k = 0; k < n_obstacles; ++k) {
      Obstacle o;
      o.person = (rng() % 2) == 1;
      if (o.person) {
        o.rx = W * uni(0.12, 0.14);
        o.ry = std::min(o.rx * uni(1.6, 1.9), 0.38 * H);
        o.color = {static_cast<float>(uni(0.75, 0.9)), static_cast<float>(uni(0.15, 0.3)),
                   static_cast<float>(uni(0.15, 0.3))};
      } else {
        o.rx = W * uni(0.22, 0.26);
        o.ry = o.rx * uni(0.55, 0.7);
        o.color = {static_cast<float>(uni(0.1, 0.25)), static_cast<float>(uni(0.15, 0.3)),
                   static_cast<float>(uni(0.45, 0.65))};
      }
      // A few placement attempts; obstacles that would overlap are dropped.
      for (int attempt = 0; attempt < 8; ++attempt) {
        const double base_y = uni(track.top + 0.35 * (H - track.top), H - 2.0);
        o.cy = base_y - o.ry;
        o.cx = std::clamp(track.center(base_y) + uni(-0.9, 0.9) * track.half(base_y), o.rx, W - o.rx);
        const bool clear = std::none_of(obstacles.begin(), obstacles.end(), [&](const Obstacle& q) {
          return std::abs(q.cx - o.cx) < q.rx + o.rx + 2 && std::abs(q.cy - o.cy) < q.ry + o.ry + 2;
        });
        if (clear) {
          obstacles.push_back(o);
          break;
        }
      }
    }

    // Mask: background, road, then obstacles by render rank (cars before people).
    LabelMap mask(1, height, width, bg_id);
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        const double xc = static_cast<double>(x) + 0.5, yc = static_cast<double>(y) + 0.5;
        if (track.contains(xc, yc)) mask.at(0, y, x) = road_id;
      }
    for (bool people : {false, true}) {
      const std::int32_t id = people ? person_id : car_id;
      for (const auto& o : obstacles) {
        if (o.person != people) continue;
        for (std::size_t y = 0; y < height; ++y)
          for (std::size_t x = 0; x < width; ++x)
            if (o.contains(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) mask.at(0, y, x) = id;
      }
    }

    // Image: same-hue ground, a slightly darker track, blotchy texture.
    const double tone = uni(-0.02, 0.02);
    const std::array<double, 3> ground = {0.60 + tone, 0.50 + tone, 0.35 + tone};
    const double track_offset = uni(0.14, 0.16);
    ValueNoise blotches(rng, width / 8 + 1, height / 8 + 1);
    std::normal_distribution<double> grain(0.0, 0.02);
    Tensor image({1, 3, height, width});
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        const double tex = 0.05 * (blotches.at(static_cast<double>(x) / 8.0, static_cast<double>(y) / 8.0) - 0.5);
        const auto label = mask.at(0, y, x);
        const Obstacle* hit = nullptr;
        if (label == car_id || label == person_id) {
          for (const auto& o : obstacles)
            if ((label == person_id) == o.person &&
                o.contains(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5))
              hit = &o;
        }
        for (std::size_t c = 0; c < 3; ++c) {
          double v = hit ? hit->color[c] : ground[c] + tex;
          if (!hit && label == road_id) v -= track_offset;
          v += grain(rng);
          image(0, c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }

    AnnotationDocument doc;
    char name[32];
    std::snprintf(name, sizeof name, "toy_%04zu.png", i);
    doc.image_path = name;
    doc.extra = {{"flags", json::object()},
                 {"fillColor", {255, 0, 0, 128}},
                 {"lineColor", {0, 255, 0, 128}},
                 {"imageData", nullptr},
                 {"imageHeight", height},
                 {"imageWidth", width}};
    Polygon road;
    road.label = "road";
    std::vector<Point> right;
    const double y_top = track.top;
    const int steps = std::max(4, static_cast<int>((H - y_top) / 2.0));
    for (int k = 0; k <= steps; ++k) {
      const double y = y_top + (H - y_top) * k / steps;
      road.points.push_back({track.center(y) - track.half(y), y});
      right.push_back({track.center(y) + track.half(y), y});
    }
    road.points.insert(road.points.end(), right.rbegin(), right.rend());
    doc.shapes.push_back(std::move(road));
    int cars = 0, people = 0;
    for (const auto& o : obstacles) {
      Polygon p;
      p.label = o.person ? "person-" + std::to_string(people++) : "car-" + std::to_string(cars++);
      p.points = o.polygon();
      doc.shapes.push_back(std::move(p));
    }

    out.samples.push_back({std::move(image), std::move(mask), Condition::synthetic});
    out.documents.push_back(std::move(doc));
  }
  return out;
}

}  // namespace cmsnet
