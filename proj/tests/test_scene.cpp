#include <gtest/gtest.h>

#include "skimba/scene.hpp"

using namespace skimba;

namespace {

// Brute-force march with a tiny fixed step; returns label and entry distance.
RayHit dense_march(const VoxelGrid& g, const Vec3& o, const Vec3& d) {
  const double vs = g.voxel_size, step = vs * 1e-3;
  const Vec3 hi{g.extents[0] * vs, g.extents[1] * vs, g.extents[2] * vs};
  auto [t0, t1] = ray_box(o, d, {0, 0, 0}, hi);
  t0 = std::max(t0, 0.0);
  for (double t = t0 + step / 2; t < t1; t += step) {
    std::array<long, 3> c{};
    bool inside = true;
    for (int a = 0; a < 3; ++a) {
      c[a] = static_cast<long>(std::floor((o[a] + t * d[a]) / vs));
      inside = inside && c[a] >= 0 && c[a] < static_cast<long>(g.extents[a]);
    }
    if (!inside) continue;
    const Label l = g.at(std::size_t(c[0]), std::size_t(c[1]), std::size_t(c[2]));
    if (l != kEmpty) return {true, t, l};
  }
  return {};
}

}  // namespace

TEST(Generator, IsDeterministicPerSeed) {
  const SceneConfig cfg;
  EXPECT_EQ(generate_grid(7, cfg), generate_grid(7, cfg));
  EXPECT_NE(generate_grid(7, cfg).labels, generate_grid(8, cfg).labels);
  const SyntheticScene a = generate_scene(3, cfg), b = generate_scene(3, cfg);
  EXPECT_TRUE(std::equal(a.image.data().begin(), a.image.data().end(), b.image.data().begin()));
}

TEST(Generator, GroundLayerAndClassRange) {
  const SceneConfig cfg;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const VoxelGrid g = generate_grid(seed, cfg);
    EXPECT_NO_THROW(g.validate(kLatentFactor));
    for (std::size_t l = 0; l < g.extents[0]; ++l)
      for (std::size_t w = 0; w < g.extents[1]; ++w) ASSERT_EQ(g.at(l, w, 0), kGround);
    std::size_t objects = 0;
    for (std::size_t i = 0; i < g.volume(); ++i) {
      if (i % g.extents[2] != 0) {
        EXPECT_NE(g.labels[i], kGround);
        objects += g.labels[i] != kEmpty;
      }
    }
    EXPECT_GT(objects, 0u) << "seed " << seed;
  }
}

TEST(Generator, RejectsTooSmallConfigs) {
  SceneConfig cfg;
  cfg.grid = {4, 32, 8};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = SceneConfig{};
  cfg.classes = 3;
  EXPECT_THROW(generate_grid(0, cfg), std::invalid_argument);
}

TEST(Camera, SeesTheSceneFromAbove) {
  const SceneConfig cfg;
  const SyntheticScene s = generate_scene(1, cfg);
  EXPECT_GT(visible_occupied(s.grid, s.camera), 0u);
  EXPECT_EQ(s.image.shape(), (Shape{3, cfg.image_rows, cfg.image_cols}));
  // Bottom rows look at the ground, top rows at sky or tall objects.
  const std::size_t P = cfg.image_rows * cfg.image_cols;
  const std::size_t bottom = (cfg.image_rows - 1) * cfg.image_cols + cfg.image_cols / 2;
  EXPECT_NE(s.image[2 * P + bottom], float(kSkyColor[2]));
}

TEST(RayBox, SlabTest) {
  auto [t0, t1] = ray_box({-1, 0.5, 0.5}, {1, 0, 0}, {0, 0, 0}, {1, 1, 1});
  EXPECT_DOUBLE_EQ(t0, 1.0);
  EXPECT_DOUBLE_EQ(t1, 2.0);
  auto [m0, m1] = ray_box({-1, 2, 0.5}, {1, 0, 0}, {0, 0, 0}, {1, 1, 1});
  EXPECT_GT(m0, m1);
}

TEST(MarchRay, MatchesDenseSamplingOnSceneRays) {
  const SceneConfig cfg;
  const SyntheticScene s = generate_scene(5, cfg);
  const Vec3 eye = s.camera.eye();
  const std::array<std::pair<double, double>, 8> pixels{
      {{0, 0}, {47, 0}, {0, 23}, {47, 23}, {24, 12}, {10, 18}, {35, 6}, {20, 22}}};
  for (const auto& [u, v] : pixels) {
    const Vec3 d = s.camera.ray(u, v);
    const RayHit fast = march_ray(s.grid, eye, d), slow = dense_march(s.grid, eye, d);
    ASSERT_EQ(fast.hit, slow.hit) << u << "," << v;
    if (!fast.hit) continue;
    EXPECT_EQ(fast.label, slow.label) << u << "," << v;
    EXPECT_NEAR(fast.t, slow.t, cfg.voxel_size * 2e-3) << u << "," << v;
  }
}

TEST(MarchRay, HandPlacedVoxel) {
  VoxelGrid g({4, 4, 4}, 5, 1.0f);
  g.at(2, 1, 1) = kVehicle;
  const RayHit hit = march_ray(g, {-1.0, 1.5, 1.5}, {1, 0, 0});
  ASSERT_TRUE(hit.hit);
  EXPECT_EQ(hit.label, kVehicle);
  EXPECT_DOUBLE_EQ(hit.t, 3.0);
  EXPECT_FALSE(march_ray(g, {-1.0, 0.5, 1.5}, {1, 0, 0}).hit);
}

TEST(Render, ShadesByClassAndDepth) {
  VoxelGrid g({4, 4, 4}, 5, 1.0f);
  for (std::size_t w = 0; w < 4; ++w)
    for (std::size_t h = 0; h < 4; ++h) g.at(3, w, h) = kBuilding;
  CameraModel cam = CameraModel::look_at({-2.0, 2.0, 2.0}, {4.0, 2.0, 2.0}, {0, 0, 1}, 2.0, 3, 3);
  const Tensor<float> img = render(g, cam);
  const auto c = class_color(kBuilding);
  // The centre ray hits the wall at distance 5.
  EXPECT_NEAR(img[4], c[0] * depth_shade(5.0), 1e-6);
}
