#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "icount/dmcount.hpp"
#include "icount/image_io.hpp"
#include "icount/random.hpp"

namespace icount {

/// One annotated image. Pixel (x, y) has its center at integer coordinates
/// (x, y); every point satisfies 0 <= x < width and 0 <= y < height.
struct Sample {
  Image image;
  std::vector<Point> points;
  std::string id;

  bool operator==(const Sample&) const = default;
};

struct TaskDataset {
  std::string class_name;
  std::vector<Sample> train;
  std::vector<Sample> test;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ShapeKind { Disk, Square, Triangle, Ring };

inline std::string to_string(ShapeKind s) {
  switch (s) {
    case ShapeKind::Disk: return "disk";
    case ShapeKind::Square: return "square";
    case ShapeKind::Triangle: return "triangle";
    case ShapeKind::Ring: return "ring";
  }
  return "?";
}

inline ShapeKind parse_shape(const std::string& name) {
  for (auto s : {ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Ring}) {
    if (to_string(s) == name) return s;
  }
  throw std::invalid_argument("unknown shape '" + name + "' (expected disk, square, triangle or ring)");
}

/// Generator settings for one synthetic counting task. Distractors are
/// objects of other shapes that are rendered but not annotated.
struct SyntheticSpec {
  ShapeKind shape = ShapeKind::Disk;
  std::size_t count_min = 3;
  std::size_t count_max = 12;
  double radius_min = 2.5;
  double radius_max = 3.5;
  double noise = 0.05;
  std::size_t width = 64;
  std::size_t height = 64;
  std::size_t train_samples = 80;
  std::size_t test_samples = 40;
  std::uint64_t seed = 1;
  std::vector<ShapeKind> distractors;
  std::size_t distractor_min = 0;
  std::size_t distractor_max = 0;
  std::array<double, 3> color{0.9, 0.9, 0.9};
  // One colour per distractor shape; empty means distractors use `color`.
  std::vector<std::array<double, 3>> distractor_colors;
  double background = 0.1;

  void validate() const {
    if (count_min > count_max) throw std::invalid_argument("synthetic count range is empty");
    if (distractor_min > distractor_max) throw std::invalid_argument("distractor count range is empty");
    if (!(radius_min > 0.0) || radius_min > radius_max) throw std::invalid_argument("bad radius range");
    if (noise < 0.0) throw std::invalid_argument("noise level must be nonnegative");
    if (width == 0 || height == 0) throw std::invalid_argument("image extent must be positive");
    if (2.0 * radius_max >= static_cast<double>(std::min(width, height)) - 1.0) {
      throw std::invalid_argument("objects do not fit in the image");
    }
    if (distractor_max > 0 && distractors.empty()) {
      throw std::invalid_argument("distractor counts given without distractor shapes");
    }
    if (!distractor_colors.empty() && distractor_colors.size() != distractors.size()) {
      throw std::invalid_argument("distractor_colors must list one colour per distractor shape");
    }
  }
};

namespace detail {

// Signed containment test with the object centered at the origin.
inline bool shape_contains(ShapeKind shape, double dx, double dy, double r) {
  switch (shape) {
    case ShapeKind::Disk: return dx * dx + dy * dy <= r * r;
    case ShapeKind::Square: {
      const double half = 0.8 * r;
      return std::abs(dx) <= half && std::abs(dy) <= half;
    }
    case ShapeKind::Ring: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.3 * r * r;
    }
    case ShapeKind::Triangle: {
      // Upward equilateral triangle with centroid at the origin and
      // circumradius r (y grows downward).
      const double s3 = std::sqrt(3.0);
      const double ax = 0.0, ay = -r;
      const double bx = -s3 / 2.0 * r, by = r / 2.0;
      const double cx = s3 / 2.0 * r, cy = r / 2.0;
      auto edge = [](double x0, double y0, double x1, double y1, double px, double py) {
        return (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
      };
      const double e0 = edge(ax, ay, bx, by, dx, dy);
      const double e1 = edge(bx, by, cx, cy, dx, dy);
      const double e2 = edge(cx, cy, ax, ay, dx, dy);
      return (e0 <= 0 && e1 <= 0 && e2 <= 0) || (e0 >= 0 && e1 >= 0 && e2 >= 0);
    }
  }
  return false;
}

struct PlacedObject {
  ShapeKind shape;
  double x, y, r;
  bool counted;
  std::array<double, 3> color;
};

inline double quantize8(double v) {
  return static_cast<double>(std::lround(std::min(1.0, std::max(0.0, v)) * 255.0)) / 255.0;
}

}  // namespace detail

/// Paints one object into `img` (binary coverage per pixel center).
inline void render_object(Image& img, ShapeKind shape, double cx, double cy, double r,
                          const std::array<double, 3>& color) {
  const auto y0 = static_cast<long>(std::floor(cy - r - 1)), y1 = static_cast<long>(std::ceil(cy + r + 1));
  const auto x0 = static_cast<long>(std::floor(cx - r - 1)), x1 = static_cast<long>(std::ceil(cx + r + 1));
  for (long y = std::max(0L, y0); y <= std::min<long>(static_cast<long>(img.height) - 1, y1); ++y) {
    for (long x = std::max(0L, x0); x <= std::min<long>(static_cast<long>(img.width) - 1, x1); ++x) {
      if (!detail::shape_contains(shape, static_cast<double>(x) - cx, static_cast<double>(y) - cy, r)) continue;
      for (std::size_t c = 0; c < 3; ++c) img.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = color[c];
    }
  }
}

namespace detail {

inline Sample synth_sample(const SyntheticSpec& spec, const std::string& id, std::uint64_t seed) {
  Rng rng(seed);
  const auto count = static_cast<std::size_t>(
      rng.integer(static_cast<std::int64_t>(spec.count_min), static_cast<std::int64_t>(spec.count_max)));
  const auto n_distract = static_cast<std::size_t>(rng.integer(
      static_cast<std::int64_t>(spec.distractor_min), static_cast<std::int64_t>(spec.distractor_max)));

  constexpr int kAttempts = 2000;
  std::vector<PlacedObject> objects;
  auto place = [&](ShapeKind shape, bool counted, const std::array<double, 3>& color) {
    for (int attempt = 0; attempt < kAttempts; ++attempt) {
      const double r = rng.uniform(spec.radius_min, spec.radius_max);
      const double x = rng.uniform(r, static_cast<double>(spec.width) - 1.0 - r);
      const double y = rng.uniform(r, static_cast<double>(spec.height) - 1.0 - r);
      const bool clear = std::all_of(objects.begin(), objects.end(), [&](const PlacedObject& o) {
        const double dx = o.x - x, dy = o.y - y;
        return std::sqrt(dx * dx + dy * dy) > o.r + r + 1.0;
      });
      if (clear) {
        objects.push_back({shape, x, y, r, counted, color});
        return;
      }
    }
    throw std::invalid_argument("synthetic spec: cannot pack " + std::to_string(count + n_distract) +
                                " objects of radius up to " + std::to_string(spec.radius_max) + " into " +
                                std::to_string(spec.width) + "x" + std::to_string(spec.height));
  };
  for (std::size_t i = 0; i < count; ++i) place(spec.shape, true, spec.color);
  for (std::size_t i = 0; i < n_distract; ++i) {
    const auto pick = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(spec.distractors.size()) - 1));
    place(spec.distractors[pick], false, spec.distractor_colors.empty() ? spec.color : spec.distractor_colors[pick]);
  }

  Sample s;
  s.id = id;
  s.image = Image(spec.height, spec.width, spec.background);
  for (const auto& o : objects) render_object(s.image, o.shape, o.x, o.y, o.r, o.color);
  for (auto& v : s.image.pixels) {
    const double jitter = spec.noise > 0.0 ? rng.uniform(-spec.noise, spec.noise) : 0.0;
    v = quantize8(v + jitter);
  }
  for (const auto& o : objects) {
    if (o.counted) s.points.push_back({o.x, o.y});
  }
  return s;
}

}  // namespace detail

/// Deterministic synthetic task: every sample is a pure function of
/// (spec, split, index).
inline TaskDataset synth_generate(const SyntheticSpec& spec) {
  spec.validate();
  // Loose area bound before attempting placement.
  const double min_area = 3.14159 * spec.radius_min * spec.radius_min;
  const double needed = static_cast<double>(spec.count_max + spec.distractor_max) * min_area;
  if (needed > 0.6 * static_cast<double>(spec.width * spec.height)) {
    throw std::invalid_argument("synthetic spec: " + std::to_string(spec.count_max + spec.distractor_max) +
                                " objects cannot be packed into " + std::to_string(spec.width) + "x" +
                                std::to_string(spec.height));
  }
  TaskDataset ds;
  ds.class_name = to_string(spec.shape);
  for (std::size_t i = 0; i < spec.train_samples; ++i) {
    ds.train.push_back(detail::synth_sample(spec, ds.class_name + "/train/" + std::to_string(i),
                                            derive_seed(spec.seed, 1, i)));
  }
  for (std::size_t i = 0; i < spec.test_samples; ++i) {
    ds.test.push_back(detail::synth_sample(spec, ds.class_name + "/test/" + std::to_string(i),
                                           derive_seed(spec.seed, 2, i)));
  }
  return ds;
}

/// Random crop (half-open window) followed by an optional horizontal flip
/// x -> (crop_width - 1) - x. Points outside the window are dropped.
inline Sample augment(const Sample& sample, std::size_t crop_width, std::size_t crop_height,
                      double flip_probability, Rng& rng) {
  const auto& src = sample.image;
  if (crop_width > src.width || crop_height > src.height) {
    throw std::invalid_argument("crop " + std::to_string(crop_width) + "x" + std::to_string(crop_height) +
                                " larger than image " + std::to_string(src.width) + "x" +
                                std::to_string(src.height));
  }
  const auto x0 = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(src.width - crop_width)));
  const auto y0 = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(src.height - crop_height)));
  const bool flip = rng.bernoulli(flip_probability);

  Sample out;
  out.id = sample.id;
  out.image = Image(crop_height, crop_width);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < crop_height; ++y)
      for (std::size_t x = 0; x < crop_width; ++x) {
        const std::size_t sx = flip ? x0 + (crop_width - 1 - x) : x0 + x;
        out.image.at(c, y, x) = src.at(c, y0 + y, sx);
      }
  const double wx0 = static_cast<double>(x0), wy0 = static_cast<double>(y0);
  const double wx1 = wx0 + static_cast<double>(crop_width), wy1 = wy0 + static_cast<double>(crop_height);
  for (const auto& p : sample.points) {
    if (p.x < wx0 || p.x >= wx1 || p.y < wy0 || p.y >= wy1) continue;
    double x = p.x - wx0;
    if (flip) x = std::max(0.0, static_cast<double>(crop_width) - 1.0 - x);
    out.points.push_back({x, p.y - wy0});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Annotation files: one JSON document per split,
//   {"class": "...", "samples": [{"id": "...", "image": "rel/path.png",
//                                 "points": [[x, y], ...]}, ...]}
// Image paths are relative to the JSON file's directory.

namespace detail {

inline std::size_t line_of_offset(const std::string& text, std::size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<long>(offset), '\n'));
}

}  // namespace detail

struct AnnotatedSplit {
  std::string class_name;
  std::vector<Sample> samples;
};

inline AnnotatedSplit load_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open annotation file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  const std::string text = buffer.str();

  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(path.string() + ":" + std::to_string(detail::line_of_offset(text, e.byte)) +
                    ": JSON syntax error: " + e.what());
  }
  auto fail = [&](const std::string& where, const std::string& msg) -> DataError {
    return DataError(path.string() + ": " + where + ": " + msg);
  };
  if (!doc.is_object()) throw fail("document", "expected an object");
  for (const auto& [key, _] : doc.items()) {
    if (key != "class" && key != "samples") throw fail("document", "unknown key '" + key + "'");
  }
  if (!doc.contains("class") || !doc["class"].is_string()) throw fail("document", "missing string 'class'");
  if (!doc.contains("samples") || !doc["samples"].is_array()) throw fail("document", "missing array 'samples'");

  AnnotatedSplit split;
  split.class_name = doc["class"].get<std::string>();
  const auto base = path.parent_path();
  std::size_t index = 0;
  for (const auto& entry : doc["samples"]) {
    const std::string where = "sample " + std::to_string(index);
    if (!entry.is_object() || !entry.contains("image") || !entry["image"].is_string() ||
        !entry.contains("points") || !entry["points"].is_array()) {
      throw fail(where, "expected {\"image\": string, \"points\": [[x, y], ...]}");
    }
    for (const auto& [key, _] : entry.items()) {
      if (key != "id" && key != "image" && key != "points") throw fail(where, "unknown key '" + key + "'");
    }
    Sample s;
    const std::string rel = entry["image"].get<std::string>();
    s.id = entry.contains("id") ? entry["id"].get<std::string>() : rel;
    const auto image_path = base / rel;
    if (!std::filesystem::exists(image_path)) throw fail(where, "missing image file " + image_path.string());
    s.image = read_image(image_path);
    std::size_t pi = 0;
    for (const auto& pt : entry["points"]) {
      const std::string pwhere = where + " point " + std::to_string(pi);
      if (!pt.is_array() || pt.size() != 2 || !pt[0].is_number() || !pt[1].is_number()) {
        throw fail(pwhere, "expected [x, y]");
      }
      const Point p{pt[0].get<double>(), pt[1].get<double>()};
      if (p.x < 0.0 || p.y < 0.0 || p.x >= static_cast<double>(s.image.width) ||
          p.y >= static_cast<double>(s.image.height)) {
        std::ostringstream os;
        os << "coordinates (" << p.x << ", " << p.y << ") outside " << s.image.width << "x" << s.image.height;
        throw fail(pwhere, os.str());
      }
      s.points.push_back(p);
      ++pi;
    }
    split.samples.push_back(std::move(s));
    ++index;
  }
  return split;
}

/// Writes images under `<dir>/images/` and the split document to `path`.
inline void save_annotations(const std::filesystem::path& path, const std::string& class_name,
                             const std::vector<Sample>& samples, const std::string& image_prefix) {
  const auto base = path.parent_path();
  std::filesystem::create_directories(base / "images");
  nlohmann::json doc;
  doc["class"] = class_name;
  doc["samples"] = nlohmann::json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::ostringstream name;
    name << "images/" << image_prefix << '_' << std::setw(4) << std::setfill('0') << i << ".png";
    write_image(samples[i].image, base / name.str());
    nlohmann::json entry;
    entry["id"] = samples[i].id;
    entry["image"] = name.str();
    entry["points"] = nlohmann::json::array();
    for (const auto& p : samples[i].points) entry["points"].push_back({p.x, p.y});
    doc["samples"].push_back(std::move(entry));
  }
  // One point per line keeps the files diffable.
  std::ofstream out(path);
  if (!out) throw DataError("cannot write annotation file " + path.string());
  out << "{\n  \"class\": " << nlohmann::json(class_name).dump() << ",\n  \"samples\": [\n";
  for (std::size_t i = 0; i < doc["samples"].size(); ++i) {
    const auto& e = doc["samples"][i];
    out << "    {\"id\": " << e["id"].dump() << ", \"image\": " << e["image"].dump() << ", \"points\": [";
    for (std::size_t k = 0; k < e["points"].size(); ++k) {
      out << (k ? "," : "") << "\n      " << e["points"][k].dump();
    }
    out << (e["points"].empty() ? "" : "\n    ") << "]}" << (i + 1 < doc["samples"].size() ? "," : "") << "\n";
  }
  out << "  ]\n}\n";
}

/// Loads a task from its train and test split documents.
inline TaskDataset load_task(const std::filesystem::path& train_path, const std::filesystem::path& test_path) {
  auto train = load_annotations(train_path);
  auto test = load_annotations(test_path);
  if (train.class_name != test.class_name) {
    throw DataError("train split class '" + train.class_name + "' differs from test split class '" +
                    test.class_name + "'");
  }
  std::set<std::string> ids;
  for (const auto& s : train.samples) ids.insert(s.id);
  for (const auto& s : test.samples) {
    if (ids.count(s.id)) throw DataError("sample id '" + s.id + "' appears in both splits");
  }
  return TaskDataset{train.class_name, std::move(train.samples), std::move(test.samples)};
}

inline void save_task(const std::filesystem::path& dir, const TaskDataset& ds) {
  std::filesystem::create_directories(dir);
  save_annotations(dir / "train.json", ds.class_name, ds.train, ds.class_name + "_train");
  save_annotations(dir / "test.json", ds.class_name, ds.test, ds.class_name + "_test");
}

}  // namespace icount
