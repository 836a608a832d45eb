#include "diffcap/scene.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>

namespace diffcap {

namespace {

int word_index(const std::array<const char*, 4>& words, const std::string& w,
               const char* kind) {
  for (int i = 0; i < 4; ++i)
    if (w == words[(std::size_t)i]) return i;
  throw UsageError(std::string("scene: unknown ") + kind + " \"" + w + "\"");
}

}  // namespace

void validate_scene(const Scene& scene) {
  if (scene.objects.size() < 2 || scene.objects.size() > 4)
    throw UsageError("scene: object count " + std::to_string(scene.objects.size()) +
                     " outside [2, 4]");
  std::vector<int> cells;
  for (const SceneObject& o : scene.objects) {
    if (o.shape < 0 || o.shape >= 4 || o.color < 0 || o.color >= 4)
      throw UsageError("scene: attribute index out of range");
    if (o.row < 0 || o.row >= kGridSide || o.col < 0 || o.col >= kGridSide)
      throw UsageError("scene: cell (" + std::to_string(o.row) + ", " + std::to_string(o.col) +
                       ") outside the grid");
    cells.push_back(o.row * kGridSide + o.col);
  }
  std::sort(cells.begin(), cells.end());
  if (std::adjacent_find(cells.begin(), cells.end()) != cells.end())
    throw UsageError("scene: two objects share a cell");
}

Scene sample_scene(Rng& rng) {
  Scene scene;
  int count = 2 + rng.uniform_int(3);
  // Distinct cells via a partial shuffle of the grid.
  std::array<int, kGridCells> cells;
  std::iota(cells.begin(), cells.end(), 0);
  for (int i = 0; i < count; ++i) {
    int j = i + rng.uniform_int(kGridCells - i);
    std::swap(cells[(std::size_t)i], cells[(std::size_t)j]);
  }
  for (int i = 0; i < count; ++i) {
    SceneObject o;
    o.shape = rng.uniform_int(4);
    o.color = rng.uniform_int(4);
    o.row = cells[(std::size_t)i] / kGridSide;
    o.col = cells[(std::size_t)i] % kGridSide;
    scene.objects.push_back(o);
  }
  return scene;
}

SceneFeatures scene_features(const Scene& scene) {
  validate_scene(scene);
  SceneFeatures f;
  f.data.assign((std::size_t)kCondSlots * kCondFeatureDim, 0.0);
  for (const SceneObject& o : scene.objects) {
    std::size_t base = (std::size_t)((o.row * kGridSide + o.col) * kCondFeatureDim);
    f.data[base + (std::size_t)o.shape] = 1.0;
    f.data[base + 4 + (std::size_t)o.color] = 1.0;
    f.data[base + 8] = 1.0;
  }
  std::size_t summary = (std::size_t)(kGridCells * kCondFeatureDim);
  for (int cell = 0; cell < kGridCells; ++cell)
    for (int d = 0; d < kCondFeatureDim; ++d)
      f.data[summary + (std::size_t)d] +=
          f.data[(std::size_t)(cell * kCondFeatureDim + d)] / (double)kGridCells;
  return f;
}

std::vector<std::string> relation_words(const SceneObject& a, const SceneObject& b) {
  if (a.row < b.row) return {"above"};
  if (a.row > b.row) return {"below"};
  if (a.col < b.col) return {"left", "of"};
  return {"right", "of"};
}

std::vector<int> canonical_order(const Scene& scene) {
  std::vector<int> order(scene.objects.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const SceneObject& x = scene.objects[(std::size_t)a];
    const SceneObject& y = scene.objects[(std::size_t)b];
    return std::tie(x.row, x.col) < std::tie(y.row, y.col);
  });
  return order;
}

Caption render_caption_ordered(const Scene& scene, const std::vector<int>& order) {
  validate_scene(scene);
  if (order.size() != scene.objects.size())
    throw UsageError("render: order has " + std::to_string(order.size()) + " entries for " +
                     std::to_string(scene.objects.size()) + " objects");
  std::vector<std::string> words;
  Caption cap;
  auto push_object = [&](int idx) {
    const SceneObject& o = scene.objects[(std::size_t)order[(std::size_t)idx]];
    words.push_back("a");
    cap.color_positions.push_back((int)words.size());
    words.push_back(kColorWords[(std::size_t)o.color]);
    words.push_back(kShapeWords[(std::size_t)o.shape]);
  };
  auto push_relation = [&](int i, int j) {
    for (std::string& w : relation_words(scene.objects[(std::size_t)order[(std::size_t)i]],
                                         scene.objects[(std::size_t)order[(std::size_t)j]]))
      words.push_back(std::move(w));
  };
  int count = (int)scene.objects.size();
  push_object(0);
  push_relation(0, 1);
  push_object(1);
  if (count >= 3) {
    words.push_back("and");
    push_object(2);
  }
  if (count == 4) {
    push_relation(2, 3);
    push_object(3);
  }
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) cap.text += ' ';
    cap.text += words[i];
  }
  return cap;
}

Caption render_caption(const Scene& scene) {
  return render_caption_ordered(scene, canonical_order(scene));
}

std::vector<CaptionedScene> generate_dataset(int n, std::uint64_t seed) {
  if (n < 1) throw UsageError("generate_dataset: n must be >= 1, got " + std::to_string(n));
  std::vector<CaptionedScene> out;
  out.reserve((std::size_t)n);
  int train_end = (int)((std::int64_t)n * 90 / 100);
  int val_end = (int)((std::int64_t)n * 95 / 100);
  for (int i = 0; i < n; ++i) {
    Rng rng = Rng::derive(seed, (std::uint64_t)i);
    CaptionedScene rec;
    rec.scene = sample_scene(rng);
    Caption cap = render_caption(rec.scene);
    rec.caption = std::move(cap.text);
    rec.color_positions = std::move(cap.color_positions);
    rec.split = i < train_end ? "train" : (i < val_end ? "val" : "test");
    out.push_back(std::move(rec));
  }
  return out;
}

void write_dataset_jsonl(const std::string& path, const std::vector<CaptionedScene>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("dataset: cannot write " + path);
  for (const CaptionedScene& rec : records) {
    nlohmann::json objs = nlohmann::json::array();
    for (const SceneObject& o : rec.scene.objects)
      objs.push_back({{"shape", kShapeWords[(std::size_t)o.shape]},
                      {"color", kColorWords[(std::size_t)o.color]},
                      {"row", o.row},
                      {"col", o.col}});
    nlohmann::json line = {{"scene", {{"objects", objs}}},
                           {"caption", rec.caption},
                           {"color_positions", rec.color_positions},
                           {"split", rec.split}};
    out << line.dump() << '\n';
  }
  if (!out) throw std::runtime_error("dataset: write failed for " + path);
}

std::vector<CaptionedScene> read_dataset_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("dataset: cannot open " + path);
  std::vector<CaptionedScene> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      CaptionedScene rec;
      for (const auto& jo : j.at("scene").at("objects")) {
        SceneObject o;
        o.shape = word_index(kShapeWords, jo.at("shape").get<std::string>(), "shape");
        o.color = word_index(kColorWords, jo.at("color").get<std::string>(), "color");
        o.row = jo.at("row").get<int>();
        o.col = jo.at("col").get<int>();
        rec.scene.objects.push_back(o);
      }
      validate_scene(rec.scene);
      rec.caption = j.at("caption").get<std::string>();
      rec.color_positions = j.at("color_positions").get<std::vector<int>>();
      std::string split = j.at("split").get<std::string>();
      if (split != "train" && split != "val" && split != "test")
        throw UsageError("unknown split \"" + split + "\"");
      rec.split = std::move(split);
      out.push_back(std::move(rec));
    } catch (const nlohmann::json::exception& e) {
      throw UsageError("dataset: " + path + " line " + std::to_string(lineno) + ": " +
                       e.what());
    } catch (const UsageError& e) {
      throw UsageError("dataset: " + path + " line " + std::to_string(lineno) + ": " +
                       e.what());
    }
  }
  if (out.empty()) throw UsageError("dataset: " + path + " holds no records");
  return out;
}

std::vector<const CaptionedScene*> split_view(const std::vector<CaptionedScene>& records,
                                              const std::string& split) {
  std::vector<const CaptionedScene*> out;
  for (const CaptionedScene& rec : records)
    if (rec.split == split) out.push_back(&rec);
  return out;
}

}  // namespace diffcap
