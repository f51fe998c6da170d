#pragma once

// Images, entity crops, synthetic scenes and the patch encoder input.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmmcot/grammar.hpp"
#include "cmmcot/tensor.hpp"

namespace cmmcot {

inline constexpr int kChannels = 3;
inline constexpr int kDefaultMinSide = 32;
inline constexpr int kDefaultPatch = 8;

/// RGB image, row-major HxWx3, values in [0, 1].
class Image {
 public:
  Image() = default;
  Image(int height, int width, float fill = 0.0f);

  int height() const { return height_; }
  int width() const { return width_; }
  bool empty() const { return pixels_.empty(); }

  float& at(int y, int x, int c) { return pixels_[index(y, x, c)]; }
  float at(int y, int x, int c) const { return pixels_[index(y, x, c)]; }

  const std::vector<float>& data() const { return pixels_; }
  std::vector<float>& data() { return pixels_; }

  friend bool operator==(const Image&, const Image&) = default;

 private:
  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x)) *
               kChannels +
           static_cast<std::size_t>(c);
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<float> pixels_;
};

/// Copy of the half-open pixel region.
Image cut_region(const Image& image, const PixelBox& region);

/// Bilinear resampling with half-pixel centers and edge clamping.
Image resize_bilinear(const Image& image, int out_height, int out_width);

struct EntityCrop {
  ImageIndexRef source;
  BoundingBox box;
  Image pixels;
};

/// Cuts `box` out of `image`; if the shorter side is below `min_side` the crop
/// is upscaled so the shorter side equals `min_side`, keeping aspect ratio.
/// Throws std::invalid_argument for degenerate or out-of-frame boxes.
EntityCrop extract_crop(const Image& image, const BoundingBox& box, int min_side = kDefaultMinSide,
                        ImageIndexRef source = {});

/// Size of an image of `height` x `width` after the minimum-side rule.
std::pair<int, int> crop_output_size(int height, int width, int min_side);

// ---------------------------------------------------------------------------
// Patch encoder input

struct PatchGrid {
  int rows = 0;
  int cols = 0;
  int count() const { return rows * cols; }
};

/// ceil(h / p) x ceil(w / p). Throws when the image is smaller than a patch.
PatchGrid patch_grid(int height, int width, int patch);

/// Flattened non-overlapping patches, one row per patch in row-major patch
/// order; each row is (y, x, channel) within the patch, zero-padded at the
/// right and bottom edges. Shape: count x (patch * patch * 3).
MatrixF patch_features(const Image& image, int patch);

enum class VisualOrigin : std::uint8_t { InputImage, EntityCrop };

struct VisualTokenSeq {
  MatrixF tokens;  // count x dim
  PatchGrid grid;
  VisualOrigin origin = VisualOrigin::InputImage;
  std::uint32_t source_id = 0;
};

/// Linear patch projection: tokens = features * weight + bias.
struct PatchProjection {
  Eigen::Ref<const MatrixF> weight;  // (patch * patch * 3) x dim
  Eigen::Ref<const VectorF> bias;    // dim
};

VisualTokenSeq encode_image(const Image& image, int patch, const PatchProjection& projection,
                            VisualOrigin origin = VisualOrigin::InputImage, std::uint32_t source_id = 0);

// ---------------------------------------------------------------------------
// Synthetic scenes

enum class ShapeKind : std::uint8_t { Square, Circle, Triangle };

std::string_view to_string(ShapeKind kind);
ShapeKind shape_kind_from_string(std::string_view name);

struct NamedColor {
  std::string_view name;
  std::array<float, 3> rgb;
};

/// Palette used by the synthetic scenes; all channels are multiples of 1/255
/// so PNG round trips are exact.
const std::vector<NamedColor>& palette();
std::array<float, 3> color_rgb(std::string_view name);

struct ShapeSpec {
  ShapeKind kind = ShapeKind::Square;
  std::string color = "red";
  int x = 0;  // top-left of the bounding square
  int y = 0;
  int size = 8;

  std::string entity_name() const;  // e.g. "red square"
  friend bool operator==(const ShapeSpec&, const ShapeSpec&) = default;
};

struct SceneSpec {
  int width = 32;
  int height = 32;
  std::string background = "black";
  std::vector<ShapeSpec> shapes;
  /// Reject two shapes with the same kind and color.
  bool unique = true;
  /// Optional per-pixel uniform noise of this amplitude, drawn from `seed`.
  float noise = 0.0f;
  std::uint64_t seed = 0;

  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

struct Scene {
  Image image;
  std::vector<PixelBox> boxes;  // exact painted extent of each shape, spec order
};

/// Deterministic rasterization. Throws std::invalid_argument for shapes
/// outside the frame or duplicate shapes when `unique` is set.
Scene synth_scene(const SceneSpec& spec);

void to_json(nlohmann::json& j, const ShapeSpec& s);
void from_json(const nlohmann::json& j, ShapeSpec& s);
void to_json(nlohmann::json& j, const SceneSpec& s);
void from_json(const nlohmann::json& j, SceneSpec& s);

// ---------------------------------------------------------------------------
// PNG persistence (8-bit RGB)

void write_png(const Image& image, const std::filesystem::path& path);
Image read_png(const std::filesystem::path& path);

}  // namespace cmmcot
