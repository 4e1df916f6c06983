#pragma once

#include <limits>

#include "skimba/networks.hpp"

namespace skimba {

// Desk-scale class layout.
enum SceneClass : Label { kEmpty = 0, kGround = 1, kBuilding = 2, kVehicle = 3, kPole = 4 };
inline constexpr std::size_t kSceneClasses = 5;
inline constexpr std::uint32_t kGeneratorVersion = 1;

inline const std::array<std::string_view, kSceneClasses> kClassNames{"empty", "ground", "building", "vehicle",
                                                                     "pole"};

inline std::string class_name(std::size_t c) {
  return c < kClassNames.size() ? std::string(kClassNames[c]) : "class" + std::to_string(c);
}

struct SceneConfig {
  Triple grid{32, 32, 8};
  std::size_t classes = kSceneClasses;
  double voxel_size = 0.2;
  std::size_t image_rows = 24;
  std::size_t image_cols = 48;
  double focal = 24.0;  // pixels

  void validate() const {
    if (classes < kSceneClasses) {
      throw std::invalid_argument("scene generator needs at least " + std::to_string(kSceneClasses) + " classes");
    }
    if (grid[0] < 8 || grid[1] < 8 || grid[2] < 4) {
      throw std::invalid_argument("scene grid must be at least 8 x 8 x 4 voxels");
    }
    if (!(voxel_size > 0)) throw std::invalid_argument("voxel size must be positive");
    if (!(focal > 0)) throw std::invalid_argument("focal length must be positive");
    if (image_rows < 2 || image_cols < 2) throw std::invalid_argument("image extents must be at least 2");
  }

  /// Fixed viewpoint behind the l = 0 face, above the ground, looking along +l.
  CameraModel camera() const {
    const double L = static_cast<double>(grid[0]) * voxel_size;
    const double W = static_cast<double>(grid[1]) * voxel_size;
    const double H = static_cast<double>(grid[2]) * voxel_size;
    return CameraModel::look_at({-0.3 * L, 0.5 * W, 1.6 * H}, {0.6 * L, 0.5 * W, 0.0}, {0, 0, 1}, focal,
                                image_rows, image_cols);
  }
};

inline std::array<double, 3> class_color(Label c) {
  switch (c) {
    case kGround: return {0.35, 0.30, 0.25};
    case kBuilding: return {0.70, 0.70, 0.75};
    case kVehicle: return {0.80, 0.10, 0.10};
    case kPole: return {0.90, 0.85, 0.20};
    default: return {0.5, 0.5, 0.5};
  }
}
inline constexpr std::array<double, 3> kSkyColor{0.55, 0.70, 0.90};

/// Brightness falloff with hit distance in metres.
inline double depth_shade(double t) { return 1.0 / (1.0 + 0.15 * t); }

struct RayHit {
  bool hit = false;
  double t = 0;  // entry distance along the unit ray
  Label label = kEmpty;
};

/// Slab test against the axis-aligned box [lo, hi]; returns (t_enter, t_exit).
inline std::pair<double, double> ray_box(const Vec3& o, const Vec3& d, const Vec3& lo, const Vec3& hi) {
  double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (d[a] == 0.0) {
      if (o[a] < lo[a] || o[a] > hi[a]) return {1.0, 0.0};
      continue;
    }
    double ta = (lo[a] - o[a]) / d[a], tb = (hi[a] - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  return {t0, t1};
}

/// First occupied voxel along a ray, by voxel traversal (Amanatides & Woo).
inline RayHit march_ray(const VoxelGrid& grid, const Vec3& origin, const Vec3& dir) {
  const double vs = grid.voxel_size;
  const Vec3 hi{grid.extents[0] * vs, grid.extents[1] * vs, grid.extents[2] * vs};
  auto [t_enter, t_exit] = ray_box(origin, dir, {0, 0, 0}, hi);
  t_enter = std::max(t_enter, 0.0);
  if (t_enter > t_exit) return {};
  std::array<long, 3> cell{}, step{};
  std::array<double, 3> t_max{}, t_delta{};
  for (int a = 0; a < 3; ++a) {
    const double p = origin[a] + t_enter * dir[a];
    long c = static_cast<long>(std::floor(p / vs));
    c = std::clamp(c, 0L, static_cast<long>(grid.extents[a]) - 1);
    cell[a] = c;
    if (dir[a] > 0) {
      step[a] = 1;
      t_max[a] = ((static_cast<double>(c) + 1) * vs - origin[a]) / dir[a];
      t_delta[a] = vs / dir[a];
    } else if (dir[a] < 0) {
      step[a] = -1;
      t_max[a] = (static_cast<double>(c) * vs - origin[a]) / dir[a];
      t_delta[a] = -vs / dir[a];
    } else {
      step[a] = 0;
      t_max[a] = t_delta[a] = std::numeric_limits<double>::infinity();
    }
  }
  double t = t_enter;
  while (true) {
    const Label l = grid.at(static_cast<std::size_t>(cell[0]), static_cast<std::size_t>(cell[1]),
                            static_cast<std::size_t>(cell[2]));
    if (l != kEmpty) return {true, t, l};
    int a = 0;
    if (t_max[1] < t_max[a]) a = 1;
    if (t_max[2] < t_max[a]) a = 2;
    t = t_max[a];
    cell[a] += step[a];
    if (cell[a] < 0 || cell[a] >= static_cast<long>(grid.extents[a])) return {};
    t_max[a] += t_delta[a];
  }
}

inline std::array<double, 3> shade(const RayHit& hit) {
  if (!hit.hit) return kSkyColor;
  const auto c = class_color(hit.label);
  const double s = depth_shade(hit.t);
  return {c[0] * s, c[1] * s, c[2] * s};
}

/// 3 x rows x cols RGB image of the grid through the pinhole camera; each
/// pixel samples the ray through its centre.
template <typename T = float>
Tensor<T> render(const VoxelGrid& grid, const CameraModel& cam) {
  cam.validate();
  const std::size_t R = cam.rows, Cc = cam.cols, P = R * Cc;
  std::vector<T> img(3 * P);
  const Vec3 eye = cam.eye();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < Cc; ++c) {
      const auto rgb = shade(march_ray(grid, eye, cam.ray(static_cast<double>(c), static_cast<double>(r))));
      for (std::size_t k = 0; k < 3; ++k) img[k * P + r * Cc + c] = static_cast<T>(rgb[k]);
    }
  return Tensor<T>({3, R, Cc}, std::move(img));
}

/// Number of occupied voxels whose centre projects inside the image.
inline std::size_t visible_occupied(const VoxelGrid& grid, const CameraModel& cam) {
  std::size_t n = 0;
  for (std::size_t l = 0; l < grid.extents[0]; ++l)
    for (std::size_t w = 0; w < grid.extents[1]; ++w)
      for (std::size_t h = 0; h < grid.extents[2]; ++h) {
        if (grid.at(l, w, h) == kEmpty) continue;
        const Vec3 pc = cam.to_camera(voxel_center(l, w, h, grid.voxel_size));
        if (pc[2] <= 0) continue;
        const double u = cam.fx * pc[0] / pc[2] + cam.cx, v = cam.fy * pc[1] / pc[2] + cam.cy;
        if (u >= 0 && v >= 0 && u <= static_cast<double>(cam.cols - 1) && v <= static_cast<double>(cam.rows - 1)) ++n;
      }
  return n;
}

struct SyntheticScene {
  std::uint64_t seed = 0;
  VoxelGrid grid;
  CameraModel camera;
  Tensor<float> image;  // 3 x rows x cols
};

namespace detail {
inline void fill_box(VoxelGrid& g, const Triple& lo, const Triple& size, Label label) {
  for (std::size_t l = lo[0]; l < std::min(lo[0] + size[0], g.extents[0]); ++l)
    for (std::size_t w = lo[1]; w < std::min(lo[1] + size[1], g.extents[1]); ++w)
      for (std::size_t h = lo[2]; h < std::min(lo[2] + size[2], g.extents[2]); ++h) g.at(l, w, h) = label;
}
}  // namespace detail

/// Ground layer at h = 0, 2-6 boxes (buildings or vehicles) standing on it,
/// 0-4 single-voxel poles; then rendered through the configured camera.
inline VoxelGrid generate_grid(std::uint64_t seed, const SceneConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(seed, kGeneratorVersion));
  VoxelGrid g(cfg.grid, static_cast<std::uint32_t>(cfg.classes), static_cast<float>(cfg.voxel_size));
  const std::size_t L = cfg.grid[0], W = cfg.grid[1], H = cfg.grid[2];
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t w = 0; w < W; ++w) g.at(l, w, 0) = kGround;

  const std::size_t boxes = uniform_index(rng, 2, 6);
  for (std::size_t b = 0; b < boxes; ++b) {
    const bool building = uniform<double>(rng, 0.0, 1.0) < 0.5;
    Triple size;
    if (building) {
      size = {uniform_index(rng, L / 8, L / 4), uniform_index(rng, W / 8, W / 4), uniform_index(rng, H / 2, H - 1)};
    } else {
      size = {uniform_index(rng, 2, std::max<std::size_t>(2, L / 8)), uniform_index(rng, 2, std::max<std::size_t>(2, W / 10)),
              std::max<std::size_t>(1, H / 4)};
    }
    size = {std::max<std::size_t>(size[0], 1), std::max<std::size_t>(size[1], 1), std::max<std::size_t>(size[2], 1)};
    const Triple lo{uniform_index(rng, 0, L - size[0]), uniform_index(rng, 0, W - size[1]), 1};
    detail::fill_box(g, lo, size, building ? kBuilding : kVehicle);
  }
  const std::size_t poles = uniform_index(rng, 0, 4);
  for (std::size_t p = 0; p < poles; ++p) {
    const std::size_t l = uniform_index(rng, 0, L - 1), w = uniform_index(rng, 0, W - 1);
    const std::size_t height = uniform_index(rng, std::min<std::size_t>(3, H - 1), H - 1);
    detail::fill_box(g, {l, w, 1}, {1, 1, height}, kPole);
  }
  return g;
}

inline SyntheticScene make_scene(std::uint64_t seed, VoxelGrid grid, const SceneConfig& cfg) {
  SyntheticScene s;
  s.seed = seed;
  s.camera = cfg.camera();
  if (visible_occupied(grid, s.camera) == 0) throw std::runtime_error("camera sees no occupied voxel");
  s.image = render<float>(grid, s.camera);
  s.grid = std::move(grid);
  return s;
}

inline SyntheticScene generate_scene(std::uint64_t seed, const SceneConfig& cfg) {
  return make_scene(seed, generate_grid(seed, cfg), cfg);
}

}  // namespace skimba
