#pragma once

#include <cmath>
#include <compare>
#include <filesystem>
#include <functional>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lesionsynth/error.hpp"
#include "lesionsynth/image.hpp"

namespace lesionsynth {

enum class Label { lesion, anatomy };

inline const char *to_string(Label l) { return l == Label::lesion ? "lesion" : "anatomy"; }

/// Axis-aligned box in normalised image coordinates ([0,1] over width/height).
struct BoundingBox {
  double cx = 0;
  double cy = 0;
  double w = 0;
  double h = 0;
  Label label = Label::lesion;

  double left() const { return cx - w / 2; }
  double right() const { return cx + w / 2; }
  double top() const { return cy - h / 2; }
  double bottom() const { return cy + h / 2; }
  friend bool operator==(const BoundingBox &, const BoundingBox &) = default;
};

/// (zone, orientation) pair; matched exactly.
struct SliceKey {
  std::string zone;
  std::string orientation;
  auto operator<=>(const SliceKey &) const = default;
  std::string str() const { return zone + "," + orientation; }
};

struct FrameAnnotation {
  std::string image;
  std::string zone;
  std::string orientation;
  std::vector<BoundingBox> boxes;

  bool is_healthy() const {
    for (const auto &b : boxes)
      if (b.label == Label::lesion)
        return false;
    return true;
  }
  SliceKey key() const { return {zone, orientation}; }

  std::vector<BoundingBox> boxes_with(Label l) const {
    std::vector<BoundingBox> out;
    for (const auto &b : boxes)
      if (b.label == l)
        out.push_back(b);
    return out;
  }
  friend bool operator==(const FrameAnnotation &, const FrameAnnotation &) = default;
};

struct SliceCounts {
  std::size_t positives = 0;
  std::size_t negatives = 0;
  std::size_t total() const { return positives + negatives; }
  friend bool operator==(const SliceCounts &, const SliceCounts &) = default;
};

/// Ordered, immutable collection of frames with per-key positive/negative counts.
class Dataset {
public:
  Dataset() = default;
  explicit Dataset(std::vector<FrameAnnotation> frames) : frames_(std::move(frames)) {
    for (const auto &f : frames_) {
      auto &c = counts_[f.key()];
      (f.is_healthy() ? c.negatives : c.positives) += 1;
    }
  }

  const std::vector<FrameAnnotation> &frames() const { return frames_; }
  const std::map<SliceKey, SliceCounts> &counts() const { return counts_; }
  std::size_t size() const { return frames_.size(); }
  bool empty() const { return frames_.empty(); }

  SliceCounts totals() const {
    SliceCounts t;
    for (const auto &[k, c] : counts_) {
      t.positives += c.positives;
      t.negatives += c.negatives;
    }
    return t;
  }

private:
  std::vector<FrameAnnotation> frames_;
  std::map<SliceKey, SliceCounts> counts_;
};

struct Violation {
  std::string field;
  std::string message;
};

/// Returns every broken invariant of `frame`; empty when the frame is valid.
inline std::vector<Violation> validate(const FrameAnnotation &frame) {
  std::vector<Violation> out;
  if (frame.image.empty())
    out.push_back({"image", "image reference is empty"});
  for (std::size_t i = 0; i < frame.boxes.size(); ++i) {
    const auto &b = frame.boxes[i];
    const std::string at = "boxes[" + std::to_string(i) + "].";
    bool finite = true;
    const std::pair<const char *, double> coords[] = {
        {"cx", b.cx}, {"cy", b.cy}, {"w", b.w}, {"h", b.h}};
    for (auto [name, v] : coords) {
      if (!std::isfinite(v)) {
        out.push_back({at + name, std::string(name) + " is not finite"});
        finite = false;
      }
    }
    if (!finite)
      continue;
    if (b.w <= 0 || b.w > 1)
      out.push_back({at + "w", "w must lie in (0, 1]"});
    if (b.h <= 0 || b.h > 1)
      out.push_back({at + "h", "h must lie in (0, 1]"});
    if (b.w <= 0 || b.h <= 0)
      continue;
    // A box entirely off-image is one violation, not one per coordinate.
    if (b.right() <= 0 || b.left() >= 1 || b.bottom() <= 0 || b.top() >= 1) {
      out.push_back({at + "box", "box does not intersect the image"});
      continue;
    }
    if (b.cx < 0 || b.cx > 1)
      out.push_back({at + "cx", "cx must lie in [0, 1]"});
    if (b.cy < 0 || b.cy > 1)
      out.push_back({at + "cy", "cy must lie in [0, 1]"});
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL

namespace detail {

inline const nlohmann::json &require(const nlohmann::json &obj, const char *field,
                                     std::size_t line) {
  auto it = obj.find(field);
  if (it == obj.end())
    throw ParseError(line, std::string("missing field \"") + field + "\"");
  return *it;
}

inline std::string require_string(const nlohmann::json &obj, const char *field,
                                  std::size_t line) {
  const auto &v = require(obj, field, line);
  if (!v.is_string())
    throw ParseError(line, std::string("field \"") + field + "\" must be a string");
  return v.get<std::string>();
}

inline double require_number(const nlohmann::json &obj, const char *field, std::size_t line) {
  const auto &v = require(obj, field, line);
  if (!v.is_number())
    throw ParseError(line, std::string("field \"") + field + "\" must be a number");
  return v.get<double>();
}

} // namespace detail

/// Parses one JSONL record. `line` is used only for error messages.
inline FrameAnnotation parse_frame(const std::string &text, std::size_t line) {
  nlohmann::json obj;
  try {
    obj = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error &e) {
    throw ParseError(line, std::string("malformed JSON: ") + e.what());
  }
  if (!obj.is_object())
    throw ParseError(line, "record must be a JSON object");
  FrameAnnotation f;
  f.image = detail::require_string(obj, "image", line);
  f.zone = detail::require_string(obj, "zone", line);
  f.orientation = detail::require_string(obj, "orientation", line);
  const auto &boxes = detail::require(obj, "boxes", line);
  if (!boxes.is_array())
    throw ParseError(line, "field \"boxes\" must be an array");
  for (const auto &jb : boxes) {
    if (!jb.is_object())
      throw ParseError(line, "box must be a JSON object");
    BoundingBox b;
    b.cx = detail::require_number(jb, "cx", line);
    b.cy = detail::require_number(jb, "cy", line);
    b.w = detail::require_number(jb, "w", line);
    b.h = detail::require_number(jb, "h", line);
    const auto label = detail::require_string(jb, "label", line);
    if (label == "lesion")
      b.label = Label::lesion;
    else if (label == "anatomy")
      b.label = Label::anatomy;
    else
      throw ParseError(line, "field \"label\" must be \"lesion\" or \"anatomy\", got \"" + label + "\"");
    f.boxes.push_back(b);
  }
  if (auto v = validate(f); !v.empty())
    throw ParseError(line, "field \"" + v.front().field + "\": " + v.front().message);
  return f;
}

/// Reads annotation JSONL. Blank lines are ignored; anything else must be a valid record.
inline Dataset parse_annotations(std::istream &in) {
  std::vector<FrameAnnotation> frames;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r\n") == std::string::npos)
      continue;
    frames.push_back(parse_frame(text, line));
  }
  return Dataset(std::move(frames));
}

inline nlohmann::ordered_json to_json(const FrameAnnotation &f) {
  nlohmann::ordered_json obj;
  obj["image"] = f.image;
  obj["zone"] = f.zone;
  obj["orientation"] = f.orientation;
  obj["boxes"] = nlohmann::ordered_json::array();
  for (const auto &b : f.boxes)
    obj["boxes"].push_back(
        {{"cx", b.cx}, {"cy", b.cy}, {"w", b.w}, {"h", b.h}, {"label", to_string(b.label)}});
  return obj;
}

/// Writes one record per line. Doubles are printed with shortest round-trip precision.
inline void serialize_annotations(const Dataset &ds, std::ostream &out) {
  for (const auto &f : ds.frames())
    out << to_json(f).dump() << '\n';
}

// ---------------------------------------------------------------------------
// Image access

using ImageLoader = std::function<GrayImage(const std::string &image_ref)>;

/// Resolves relative image references against `base_dir`.
inline ImageLoader make_file_loader(std::filesystem::path base_dir) {
  return [base = std::move(base_dir)](const std::string &ref) {
    std::filesystem::path p(ref);
    return load_image(p.is_absolute() ? p : base / p);
  };
}

/// Parses annotations from a file; image references resolve relative to its directory.
inline Dataset load_annotations(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in)
    throw Error("cannot open " + path.string());
  return parse_annotations(in);
}

} // namespace lesionsynth
