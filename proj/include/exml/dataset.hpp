// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "exml/errors.hpp"
#include "exml/tensor.hpp"

namespace exml {

/// A labeled sample collection stored as one batch tensor.
template <class T>
struct Dataset {
  Shape sample_shape;
  Tensor<T> inputs;  // [N, sample_shape...]
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }

  Tensor<T> sample(std::size_t i) const { return take_row(inputs, i); }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset out{sample_shape, gather_rows(inputs, idx), {}, num_classes};
    out.labels.reserve(idx.size());
    for (auto i : idx) out.labels.push_back(labels[i]);
    return out;
  }

  static Dataset empty_like(const Dataset& d) {
    Shape s{0};
    s.insert(s.end(), d.sample_shape.begin(), d.sample_shape.end());
    return Dataset{d.sample_shape, Tensor<T>(s), {}, d.num_classes};
  }
};

/// Affine input normalization (x - mean) / std. Images use one scalar pair;
/// vector data uses one pair per feature.
struct Normalization {
  std::vector<double> mean{0.0};
  std::vector<double> stddev{1.0};

  template <class T>
  void apply(Tensor<T>& batch) const {
    const std::size_t n = batch.row_size();
    for (std::size_t r = 0; r < batch.dim(0); ++r)
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t f = mean.size() == 1 ? 0 : j;
        auto& v = batch[r * n + j];
        v = static_cast<T>((v - mean[f]) / stddev[f]);
      }
  }

  double invert(double v, std::size_t feature) const {
    const std::size_t f = mean.size() == 1 ? 0 : feature;
    return v * stddev[f] + mean[f];
  }
};

template <class T>
struct SplitDataset {
  std::string name;
  Dataset<T> train;
  Dataset<T> test;
  Normalization norm;
};

struct DatasetOptions {
  std::string path = "builtin:blobs";
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 100;
  std::uint64_t seed = 1234;

  friend bool operator==(const DatasetOptions&, const DatasetOptions&) = default;
};

/// Environment variable naming the directory relative dataset paths are
/// resolved against.
inline constexpr const char* kDataDirEnv = "EXML_DATA_DIR";

inline bool is_builtin(const std::string& path) {
  return path.rfind("builtin:", 0) == 0;
}

inline std::filesystem::path resolve_data_path(const std::string& path) {
  std::filesystem::path p(path);
  if (is_builtin(path) || p.is_absolute()) return p;
  if (const char* dir = std::getenv(kDataDirEnv); dir && *dir)
    return std::filesystem::path(dir) / p;
  return p;
}

/// Fails with ConfigError when a dataset path points nowhere.
inline void require_dataset(const std::string& path) {
  if (is_builtin(path)) {
    static const std::array<std::string, 4> known{
        "builtin:blobs", "builtin:digits", "builtin:shapes", "builtin:uniform"};
    if (std::find(known.begin(), known.end(), path) == known.end())
      throw ConfigError("unknown builtin dataset '" + path + "'");
    return;
  }
  const auto resolved = resolve_data_path(path);
  if (!std::filesystem::is_regular_file(resolved))
    throw ConfigError("dataset file not found: " + resolved.string() +
                      " (relative paths resolve against $" + kDataDirEnv + ")");
}

namespace datagen {

inline constexpr std::size_t kBlobClasses = 10;
inline constexpr double kBlobRadius = 6.0;
inline constexpr double kBlobStd = 0.7;

/// Raw 10-class 2-D Gaussian blobs with centers evenly spaced on a circle.
inline void blobs(std::size_t per_class, std::mt19937_64& rng,
                  std::vector<double>& xs, std::vector<int>& ys) {
  std::normal_distribution<double> noise(0.0, kBlobStd);
  for (std::size_t i = 0; i < per_class; ++i)
    for (std::size_t k = 0; k < kBlobClasses; ++k) {
      const double a = 2.0 * M_PI * static_cast<double>(k) / kBlobClasses;
      xs.push_back(kBlobRadius * std::cos(a) + noise(rng));
      xs.push_back(kBlobRadius * std::sin(a) + noise(rng));
      ys.push_back(static_cast<int>(k));
    }
}

/// 5x7 bitmap glyphs for digits 0-9, one string row per line.
inline const std::array<std::array<const char*, 7>, 10>& glyphs() {
  static const std::array<std::array<const char*, 7>, 10> g{{
      {".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."},
      {"..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."},
      {".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"},
      {"#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."},
      {"...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."},
      {"#####", "#....", "####.", "....#", "....#", "#...#", ".###."},
      {"..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."},
      {"#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."},
      {".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."},
      {".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."},
  }};
  return g;
}

inline constexpr std::size_t kImageSide = 8;

/// Noisy 8x8 renderings of the digit glyphs: random placement, stroke
/// intensity, thickening, pixel dropout, and additive noise. Values in [0,1].
inline void digits(std::size_t per_class, std::mt19937_64& rng,
                   std::vector<double>& xs, std::vector<int>& ys) {
  std::uniform_int_distribution<int> off_x(0, 3), off_y(0, 1);
  std::uniform_real_distribution<double> intensity(0.6, 1.0), unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.15);
  for (std::size_t i = 0; i < per_class; ++i)
    for (std::size_t k = 0; k < 10; ++k) {
      std::array<double, kImageSide * kImageSide> img{};
      const int ox = off_x(rng), oy = off_y(rng);
      const double ink = intensity(rng);
      const bool thick = unit(rng) < 0.3;
      for (int r = 0; r < 7; ++r)
        for (int c = 0; c < 5; ++c) {
          if (glyphs()[k][r][c] != '#') continue;
          if (unit(rng) < 0.05) continue;
          img[(r + oy) * kImageSide + (c + ox)] = ink;
          if (thick && c + ox + 1 < static_cast<int>(kImageSide))
            img[(r + oy) * kImageSide + (c + ox + 1)] =
                std::max(img[(r + oy) * kImageSide + (c + ox + 1)], 0.6 * ink);
        }
      for (double v : img) xs.push_back(std::clamp(v + noise(rng), 0.0, 1.0));
      ys.push_back(static_cast<int>(k));
    }
}

/// Out-of-domain 8x8 scribbles: one to three random primitives (segments,
/// box outlines, rings, filled patches, arcs). The label is the kind of the
/// first primitive. Used as auxiliary distillation data for the digits.
inline void shapes(std::size_t count, std::mt19937_64& rng,
                   std::vector<double>& xs, std::vector<int>& ys) {
  const int S = static_cast<int>(kImageSide);
  std::uniform_int_distribution<int> kind_d(0, 4), pos(0, S - 1), extra(0, 2);
  std::uniform_real_distribution<double> unit(0.0, 1.0), coord(0.0, S - 1.0);
  std::normal_distribution<double> noise(0.0, 0.1);
  for (std::size_t n = 0; n < count; ++n) {
    std::array<double, kImageSide * kImageSide> img{};
    auto plot = [&](double fx, double fy, double ink) {
      const int x = static_cast<int>(std::lround(fx)), y = static_cast<int>(std::lround(fy));
      if (x >= 0 && x < S && y >= 0 && y < S) img[y * S + x] = std::max(img[y * S + x], ink);
    };
    const int parts = 1 + extra(rng);
    int first = 0;
    for (int p = 0; p < parts; ++p) {
      const int kind = kind_d(rng);
      if (p == 0) first = kind;
      const double ink = 0.5 + 0.5 * unit(rng);
      int a = pos(rng), b = pos(rng), c = pos(rng), d = pos(rng);
      if (a > c) std::swap(a, c);
      if (b > d) std::swap(b, d);
      switch (kind) {
        case 0: {
          const double x0 = coord(rng), y0 = coord(rng), x1 = coord(rng), y1 = coord(rng);
          for (int t = 0; t <= 16; ++t) plot(x0 + (x1 - x0) * t / 16.0, y0 + (y1 - y0) * t / 16.0, ink);
          break;
        }
        case 1:
          for (int x = a; x <= c; ++x) {
            plot(x, b, ink);
            plot(x, d, ink);
          }
          for (int y = b; y <= d; ++y) {
            plot(a, y, ink);
            plot(c, y, ink);
          }
          break;
        case 2:
        case 4: {
          const double cx = coord(rng), cy = coord(rng), r = 1.0 + 2.0 * unit(rng);
          const double span = kind == 2 ? 2 * M_PI : M_PI * (0.5 + unit(rng));
          const double phase = 2 * M_PI * unit(rng);
          for (int t = 0; t < 32; ++t) {
            const double th = phase + span * t / 32.0;
            plot(cx + r * std::cos(th), cy + r * std::sin(th), ink);
          }
          break;
        }
        default:
          for (int y = b; y <= std::min(d, b + 3); ++y)
            for (int x = a; x <= std::min(c, a + 3); ++x) plot(x, y, ink);
          break;
      }
    }
    for (double v : img) xs.push_back(std::clamp(v + noise(rng), 0.0, 1.0));
    ys.push_back(first);
  }
}

}  // namespace datagen

namespace detail {

template <class T>
Dataset<T> make_dataset(const Shape& sample_shape, std::size_t num_classes,
                        const std::vector<double>& xs,
                        const std::vector<int>& ys) {
  Shape s{ys.size()};
  s.insert(s.end(), sample_shape.begin(), sample_shape.end());
  return Dataset<T>{sample_shape,
                    Tensor<T>(s, std::vector<T>(xs.begin(), xs.end())), ys,
                    num_classes};
}

template <class T>
Normalization fit_normalization(const Dataset<T>& train, bool per_feature) {
  Normalization n;
  const std::size_t F = numel(train.sample_shape);
  const std::size_t groups = per_feature ? F : 1;
  n.mean.assign(groups, 0.0);
  n.stddev.assign(groups, 0.0);
  std::vector<double> count(groups, 0.0);
  for (std::size_t r = 0; r < train.size(); ++r)
    for (std::size_t j = 0; j < F; ++j) {
      const std::size_t g = per_feature ? j : 0;
      n.mean[g] += train.inputs[r * F + j];
      count[g] += 1;
    }
  for (std::size_t g = 0; g < groups; ++g) n.mean[g] /= std::max(count[g], 1.0);
  for (std::size_t r = 0; r < train.size(); ++r)
    for (std::size_t j = 0; j < F; ++j) {
      const std::size_t g = per_feature ? j : 0;
      const double d = train.inputs[r * F + j] - n.mean[g];
      n.stddev[g] += d * d;
    }
  for (std::size_t g = 0; g < groups; ++g) {
    n.stddev[g] = std::sqrt(n.stddev[g] / std::max(count[g], 1.0));
    if (n.stddev[g] < 1e-12) n.stddev[g] = 1.0;
  }
  return n;
}

inline Shape parse_shape(const std::string& s) {
  Shape out;
  std::stringstream ss(s);
  for (std::string p; std::getline(ss, p, 'x');) out.push_back(std::stoul(p));
  return out;
}

}  // namespace detail

/// Text dataset file:
///   # exml-dataset shape=1x8x8 classes=10
///   train,3,0.0,0.1,...
///   test,7,...
/// Values are raw (unnormalized). Auxiliary files may use any label.
template <class T>
SplitDataset<T> read_dataset_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open dataset file " + path.string());
  std::string header;
  std::getline(in, header);
  Shape shape;
  std::size_t classes = 0;
  {
    std::stringstream ss(header);
    std::string tok;
    ss >> tok >> tok;
    if (tok != "exml-dataset")
      throw ConfigError("dataset file " + path.string() +
                        " lacks the '# exml-dataset' header");
    while (ss >> tok) {
      if (tok.rfind("shape=", 0) == 0) shape = detail::parse_shape(tok.substr(6));
      if (tok.rfind("classes=", 0) == 0) classes = std::stoul(tok.substr(8));
    }
  }
  if (shape.empty() || classes == 0)
    throw ConfigError("dataset file " + path.string() +
                      " header must declare shape= and classes=");
  const std::size_t F = numel(shape);
  std::vector<double> xs[2];
  std::vector<int> ys[2];
  std::string line;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::stringstream ss(line);
    std::string split, field;
    std::getline(ss, split, ',');
    const int which = split == "test" ? 1 : 0;
    std::getline(ss, field, ',');
    ys[which].push_back(std::stoi(field));
    std::size_t n = 0;
    while (std::getline(ss, field, ',')) {
      xs[which].push_back(std::stod(field));
      ++n;
    }
    if (n != F)
      throw ConfigError("dataset file " + path.string() + " line " +
                        std::to_string(lineno) + " has " + std::to_string(n) +
                        " values, expected " + std::to_string(F));
  }
  SplitDataset<T> out;
  out.name = path.stem().string();
  out.train = detail::make_dataset<T>(shape, classes, xs[0], ys[0]);
  out.test = detail::make_dataset<T>(shape, classes, xs[1], ys[1]);
  return out;
}

template <class T>
void write_dataset_file(const std::filesystem::path& path,
                        const SplitDataset<T>& data) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write dataset file " + path.string());
  std::string shape;
  for (std::size_t i = 0; i < data.train.sample_shape.size(); ++i)
    shape += (i ? "x" : "") + std::to_string(data.train.sample_shape[i]);
  out << "# exml-dataset shape=" << shape
      << " classes=" << data.train.num_classes << "\n";
  out.precision(9);
  auto dump = [&](const Dataset<T>& d, const char* split) {
    for (std::size_t r = 0; r < d.size(); ++r) {
      out << split << "," << d.labels[r];
      for (auto v : d.inputs.row(r)) out << "," << v;
      out << "\n";
    }
  };
  dump(data.train, "train");
  dump(data.test, "test");
}

/// Loads (or synthesizes) a base dataset and normalizes it with statistics of
/// its training split. Labels must lie in [0, classes).
template <class T>
SplitDataset<T> load_dataset(const DatasetOptions& opt) {
  require_dataset(opt.path);
  SplitDataset<T> out;
  if (is_builtin(opt.path)) {
    std::mt19937_64 rng(opt.seed);
    std::vector<double> tx, vx;
    std::vector<int> ty, vy;
    Shape shape;
    std::size_t classes = 0;
    if (opt.path == "builtin:blobs") {
      datagen::blobs(opt.train_per_class, rng, tx, ty);
      datagen::blobs(opt.test_per_class, rng, vx, vy);
      shape = {2};
      classes = datagen::kBlobClasses;
    } else if (opt.path == "builtin:digits") {
      datagen::digits(opt.train_per_class, rng, tx, ty);
      datagen::digits(opt.test_per_class, rng, vx, vy);
      shape = {1, datagen::kImageSide, datagen::kImageSide};
      classes = 10;
    } else {
      throw ConfigError("'" + opt.path +
                        "' is an auxiliary source, not a labeled base dataset");
    }
    out.name = opt.path.substr(8);
    out.train = detail::make_dataset<T>(shape, classes, tx, ty);
    out.test = detail::make_dataset<T>(shape, classes, vx, vy);
  } else {
    out = read_dataset_file<T>(resolve_data_path(opt.path));
  }
  for (const auto* d : {&out.train, &out.test})
    for (int y : d->labels)
      if (y < 0 || static_cast<std::size_t>(y) >= d->num_classes)
        throw ScenarioError("dataset label " + std::to_string(y) +
                            " outside [0, " + std::to_string(d->num_classes) + ")");
  out.norm = detail::fit_normalization(out.train, out.train.sample_shape.size() == 1);
  out.norm.apply(out.train.inputs);
  out.norm.apply(out.test.inputs);
  return out;
}

/// Loads unlabeled auxiliary inputs shape-compatible with `sample_shape` and
/// normalizes them with the base dataset's normalization. `builtin:uniform`
/// draws directly in normalized space.
template <class T>
Dataset<T> load_auxiliary(const std::string& path, const Shape& sample_shape,
                          const Normalization& norm, std::size_t count,
                          std::uint64_t seed) {
  require_dataset(path);
  std::mt19937_64 rng(seed);
  Dataset<T> aux;
  if (path == "builtin:uniform") {
    std::uniform_real_distribution<double> u(-2.5, 2.5);
    std::vector<double> xs(count * numel(sample_shape));
    for (auto& v : xs) v = u(rng);
    return detail::make_dataset<T>(sample_shape, 1, xs, std::vector<int>(count, 0));
  }
  if (path == "builtin:shapes") {
    std::vector<double> xs;
    std::vector<int> ys;
    datagen::shapes(count, rng, xs, ys);
    aux = detail::make_dataset<T>({1, datagen::kImageSide, datagen::kImageSide},
                                  5, xs, ys);
  } else if (is_builtin(path)) {
    DatasetOptions o;
    o.path = path;
    o.seed = seed;
    o.train_per_class = (count + 9) / 10;
    o.test_per_class = 0;
    auto d = load_dataset<T>(o);
    aux = d.train;
    // undo the dataset's own normalization so the base one applies below
    for (std::size_t r = 0; r < aux.size(); ++r)
      for (std::size_t j = 0; j < aux.inputs.row_size(); ++j) {
        auto& v = aux.inputs[r * aux.inputs.row_size() + j];
        v = static_cast<T>(d.norm.invert(v, j));
      }
  } else {
    aux = read_dataset_file<T>(resolve_data_path(path)).train;
  }
  if (aux.sample_shape != sample_shape)
    throw InputContractError("auxiliary data shape " +
                             shape_str(aux.sample_shape) +
                             " does not match expert input " +
                             shape_str(sample_shape));
  norm.apply(aux.inputs);
  return aux;
}

}  // namespace exml
