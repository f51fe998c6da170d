#include "cmmcot/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "cmmcot/random.hpp"

namespace cmmcot {

Image::Image(int height, int width, float fill) : height_(height), width_(width) {
  if (height < 1 || width < 1) throw std::invalid_argument("Image: sides must be >= 1");
  pixels_.assign(static_cast<std::size_t>(height) * static_cast<std::size_t>(width) * kChannels, fill);
}

Image cut_region(const Image& image, const PixelBox& region) {
  if (region.x0 < 0 || region.y0 < 0 || region.x1 > image.width() || region.y1 > image.height() ||
      region.width() < 1 || region.height() < 1) {
    throw std::invalid_argument("cut_region: region outside image or empty");
  }
  Image out(region.height(), region.width());
  for (int y = 0; y < region.height(); ++y)
    for (int x = 0; x < region.width(); ++x)
      for (int c = 0; c < kChannels; ++c) out.at(y, x, c) = image.at(region.y0 + y, region.x0 + x, c);
  return out;
}

Image resize_bilinear(const Image& image, int out_height, int out_width) {
  Image out(out_height, out_width);
  const double sy = static_cast<double>(image.height()) / out_height;
  const double sx = static_cast<double>(image.width()) / out_width;
  for (int y = 0; y < out_height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(image.height() - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, image.height() - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(image.width() - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, image.width() - 1);
      const double wx = fx - x0;
      for (int c = 0; c < kChannels; ++c) {
        const double top = (1 - wx) * image.at(y0, x0, c) + wx * image.at(y0, x1, c);
        const double bot = (1 - wx) * image.at(y1, x0, c) + wx * image.at(y1, x1, c);
        out.at(y, x, c) = static_cast<float>((1 - wy) * top + wy * bot);
      }
    }
  }
  return out;
}

std::pair<int, int> crop_output_size(int height, int width, int min_side) {
  const int shorter = std::min(height, width);
  if (shorter >= min_side) return {height, width};
  const double scale = static_cast<double>(min_side) / shorter;
  auto grow = [&](int side) {
    return side == shorter ? min_side : static_cast<int>(round_half_away(side * scale));
  };
  return {grow(height), grow(width)};
}

EntityCrop extract_crop(const Image& image, const BoundingBox& box, int min_side, ImageIndexRef source) {
  if (!box.valid()) throw std::invalid_argument("extract_crop: invalid box");
  if (min_side < 1) throw std::invalid_argument("extract_crop: min_side must be >= 1");
  const PixelBox px = denormalize_box(box, image.width(), image.height());
  if (px.width() < 1 || px.height() < 1) {
    throw std::invalid_argument("extract_crop: degenerate box after denormalization");
  }
  if (px.x1 > image.width() || px.y1 > image.height()) {
    throw std::invalid_argument("extract_crop: box outside image");
  }
  Image region = cut_region(image, px);
  const auto [h, w] = crop_output_size(region.height(), region.width(), min_side);
  if (h != region.height() || w != region.width()) region = resize_bilinear(region, h, w);
  return {source, box, std::move(region)};
}

// ---------------------------------------------------------------------------

PatchGrid patch_grid(int height, int width, int patch) {
  if (patch < 1) throw std::invalid_argument("patch_grid: patch must be >= 1");
  if (height < patch || width < patch) {
    throw std::invalid_argument("patch_grid: image smaller than one patch");
  }
  return {(height + patch - 1) / patch, (width + patch - 1) / patch};
}

MatrixF patch_features(const Image& image, int patch) {
  const PatchGrid grid = patch_grid(image.height(), image.width(), patch);
  MatrixF out = MatrixF::Zero(grid.count(), patch * patch * kChannels);
  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) {
      auto row = out.row(r * grid.cols + c);
      for (int dy = 0; dy < patch; ++dy) {
        const int y = r * patch + dy;
        if (y >= image.height()) break;
        for (int dx = 0; dx < patch; ++dx) {
          const int x = c * patch + dx;
          if (x >= image.width()) break;
          for (int ch = 0; ch < kChannels; ++ch) row((dy * patch + dx) * kChannels + ch) = image.at(y, x, ch);
        }
      }
    }
  }
  return out;
}

VisualTokenSeq encode_image(const Image& image, int patch, const PatchProjection& projection,
                            VisualOrigin origin, std::uint32_t source_id) {
  const MatrixF features = patch_features(image, patch);
  if (projection.weight.rows() != features.cols() || projection.bias.size() != projection.weight.cols()) {
    throw std::invalid_argument("encode_image: projection shape mismatch");
  }
  VisualTokenSeq seq;
  seq.grid = patch_grid(image.height(), image.width(), patch);
  seq.tokens = features * projection.weight;
  seq.tokens.rowwise() += projection.bias.transpose();
  seq.origin = origin;
  seq.source_id = source_id;
  return seq;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

std::string_view to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::Square: return "square";
    case ShapeKind::Circle: return "circle";
    case ShapeKind::Triangle: return "triangle";
  }
  return "square";
}

ShapeKind shape_kind_from_string(std::string_view name) {
  if (name == "square") return ShapeKind::Square;
  if (name == "circle") return ShapeKind::Circle;
  if (name == "triangle") return ShapeKind::Triangle;
  throw std::invalid_argument("unknown shape kind '" + std::string(name) + "'");
}

const std::vector<NamedColor>& palette() {
  static const std::vector<NamedColor> colors = [] {
    auto c = [](int r, int g, int b) {
      return std::array<float, 3>{r / 255.0f, g / 255.0f, b / 255.0f};
    };
    return std::vector<NamedColor>{
        {"black", c(0, 0, 0)},       {"red", c(255, 0, 0)},      {"green", c(0, 204, 0)},
        {"blue", c(0, 0, 255)},      {"yellow", c(255, 255, 0)}, {"purple", c(153, 0, 204)},
        {"orange", c(255, 136, 0)},  {"cyan", c(0, 255, 255)},   {"white", c(255, 255, 255)},
        {"gray", c(128, 128, 128)},  {"pink", c(255, 153, 204)},
    };
  }();
  return colors;
}

std::array<float, 3> color_rgb(std::string_view name) {
  for (const auto& c : palette())
    if (c.name == name) return c.rgb;
  throw std::invalid_argument("unknown color '" + std::string(name) + "'");
}

std::string ShapeSpec::entity_name() const { return color + " " + std::string(to_string(kind)); }

namespace {

bool shape_covers(const ShapeSpec& s, int px, int py) {
  const double cx = px + 0.5, cy = py + 0.5;
  if (px < s.x || px >= s.x + s.size || py < s.y || py >= s.y + s.size) return false;
  const double half = s.size / 2.0;
  switch (s.kind) {
    case ShapeKind::Square: return true;
    case ShapeKind::Circle: {
      const double dx = cx - (s.x + half), dy = cy - (s.y + half);
      return dx * dx + dy * dy <= half * half;
    }
    case ShapeKind::Triangle: {
      // Apex on top, base on the bottom row; row r spans half * (r + 1) / size.
      const double row_half = half * (py - s.y + 1) / s.size;
      return std::abs(cx - (s.x + half)) <= row_half;
    }
  }
  return false;
}

}  // namespace

Scene synth_scene(const SceneSpec& spec) {
  Scene scene{Image(spec.height, spec.width), {}};
  const auto bg = color_rgb(spec.background);
  for (int y = 0; y < spec.height; ++y)
    for (int x = 0; x < spec.width; ++x)
      for (int c = 0; c < kChannels; ++c) scene.image.at(y, x, c) = bg[static_cast<std::size_t>(c)];

  for (std::size_t i = 0; i < spec.shapes.size(); ++i) {
    const auto& s = spec.shapes[i];
    if (s.size < 1 || s.x < 0 || s.y < 0 || s.x + s.size > spec.width || s.y + s.size > spec.height) {
      throw std::invalid_argument("synth_scene: shape " + std::to_string(i) + " outside frame");
    }
    if (spec.unique) {
      for (std::size_t j = 0; j < i; ++j) {
        if (spec.shapes[j].kind == s.kind && spec.shapes[j].color == s.color) {
          throw std::invalid_argument("synth_scene: duplicate " + s.entity_name());
        }
      }
    }
    const auto rgb = color_rgb(s.color);
    PixelBox extent{s.x + s.size, s.y + s.size, s.x, s.y};
    for (int y = s.y; y < s.y + s.size; ++y) {
      for (int x = s.x; x < s.x + s.size; ++x) {
        if (!shape_covers(s, x, y)) continue;
        for (int c = 0; c < kChannels; ++c) scene.image.at(y, x, c) = rgb[static_cast<std::size_t>(c)];
        extent.x0 = std::min(extent.x0, x);
        extent.y0 = std::min(extent.y0, y);
        extent.x1 = std::max(extent.x1, x + 1);
        extent.y1 = std::max(extent.y1, y + 1);
      }
    }
    scene.boxes.push_back(extent);
  }

  if (spec.noise > 0.0f) {
    Rng rng(spec.seed);
    for (float& v : scene.image.data()) {
      v = std::clamp(v + static_cast<float>(rng.uniform(-spec.noise, spec.noise)), 0.0f, 1.0f);
    }
  }
  return scene;
}

void to_json(nlohmann::json& j, const ShapeSpec& s) {
  j = nlohmann::json{{"kind", to_string(s.kind)}, {"color", s.color}, {"x", s.x}, {"y", s.y}, {"size", s.size}};
}

void from_json(const nlohmann::json& j, ShapeSpec& s) {
  s.kind = shape_kind_from_string(j.at("kind").get<std::string>());
  s.color = j.at("color").get<std::string>();
  s.x = j.at("x").get<int>();
  s.y = j.at("y").get<int>();
  s.size = j.value("size", 8);
}

void to_json(nlohmann::json& j, const SceneSpec& s) {
  j = nlohmann::json{{"width", s.width}, {"height", s.height}, {"background", s.background},
                     {"shapes", s.shapes}, {"unique", s.unique}};
  if (s.noise > 0.0f) {
    j["noise"] = s.noise;
    j["seed"] = s.seed;
  }
}

void from_json(const nlohmann::json& j, SceneSpec& s) {
  s.width = j.value("width", 32);
  s.height = j.value("height", 32);
  s.background = j.value("background", std::string("black"));
  s.shapes = j.value("shapes", std::vector<ShapeSpec>{});
  s.unique = j.value("unique", true);
  s.noise = j.value("noise", 0.0f);
  s.seed = j.value("seed", std::uint64_t{0});
}

// ---------------------------------------------------------------------------
// PNG

void write_png(const Image& image, const std::filesystem::path& path) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width());
  png.height = static_cast<png_uint_32>(image.height());
  png.format = PNG_FORMAT_RGB;
  std::vector<png_byte> bytes(image.data().size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<png_byte>(round_half_away(std::clamp(image.data()[i], 0.0f, 1.0f) * 255.0f));
  }
  if (!png_image_write_to_file(&png, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    throw std::runtime_error("write_png: " + path.string() + ": " + png.message);
  }
}

Image read_png(const std::filesystem::path& path) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw std::runtime_error("read_png: " + path.string() + ": " + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  std::vector<png_byte> bytes(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, bytes.data(), 0, nullptr)) {
    throw std::runtime_error("read_png: " + path.string() + ": " + png.message);
  }
  Image image(static_cast<int>(png.height), static_cast<int>(png.width));
  for (std::size_t i = 0; i < bytes.size(); ++i) image.data()[i] = bytes[i] / 255.0f;
  return image;
}

}  // namespace cmmcot
