#pragma once

#include <array>
#include <string>
#include <vector>

#include "diffcap/error.hpp"
#include "diffcap/rng.hpp"

namespace diffcap {

inline constexpr std::array<const char*, 4> kShapeWords = {"circle", "square", "triangle",
                                                           "star"};
inline constexpr std::array<const char*, 4> kColorWords = {"red", "blue", "green", "yellow"};
inline constexpr int kGridSide = 3;
inline constexpr int kGridCells = kGridSide * kGridSide;
inline constexpr int kCondFeatureDim = 9;               // shape 4 + color 4 + occupancy
inline constexpr int kCondSlots = kGridCells + 1;       // grid tokens + summary

struct SceneObject {
  int shape = 0;
  int color = 0;
  int row = 0;
  int col = 0;
};

struct Scene {
  std::vector<SceneObject> objects;  // 2..4, all cells distinct
};

void validate_scene(const Scene& scene);

Scene sample_scene(Rng& rng);

/// Conditioning input: kCondSlots rows of kCondFeatureDim, row-major. The
/// first kGridCells rows are per-cell tokens (one-hot shape, one-hot color,
/// occupancy bit; zeros when empty), the last row is their mean and serves
/// as the summary feature for length prediction.
struct SceneFeatures {
  std::vector<double> data;
  double at(int slot, int dim) const { return data[(std::size_t)(slot * kCondFeatureDim + dim)]; }
};

SceneFeatures scene_features(const Scene& scene);

struct Caption {
  std::string text;
  std::vector<int> color_positions;  // word indices of the color words, template order
};

/// Relation word(s) between two objects: rows compared first (above/below),
/// columns break same-row pairs (left of / right of).
std::vector<std::string> relation_words(const SceneObject& a, const SceneObject& b);

/// Objects in caption order: grid reading order, row first then column.
std::vector<int> canonical_order(const Scene& scene);

/// Fills the fixed template for the scene's object count, objects taken in
/// the given order. Color positions index the color words left to right.
Caption render_caption_ordered(const Scene& scene, const std::vector<int>& order);

/// Canonical caption: render_caption_ordered with canonical_order.
Caption render_caption(const Scene& scene);

struct CaptionedScene {
  Scene scene;
  std::string caption;
  std::vector<int> color_positions;
  std::string split;
};

std::vector<CaptionedScene> generate_dataset(int n, std::uint64_t seed);
void write_dataset_jsonl(const std::string& path, const std::vector<CaptionedScene>& records);
std::vector<CaptionedScene> read_dataset_jsonl(const std::string& path);

/// Pointers into `records` for one split name ("train", "val", "test").
std::vector<const CaptionedScene*> split_view(const std::vector<CaptionedScene>& records,
                                              const std::string& split);

}  // namespace diffcap
