#pragma once

#include <cstdint>
#include <string>

#include "skimba/blocks.hpp"
#include "skimba/losses.hpp"

namespace skimba {

/// Dense label volume; label 0 is empty space.
struct VoxelGrid {
  Triple extents{0, 0, 0};  // L, W, H
  std::uint32_t classes = 0;
  float voxel_size = 0.2f;
  std::vector<Label> labels;

  VoxelGrid() = default;
  VoxelGrid(const Triple& ext, std::uint32_t num_classes, float size = 0.2f)
      : extents(ext), classes(num_classes), voxel_size(size), labels(ext[0] * ext[1] * ext[2], 0) {}

  std::size_t volume() const { return extents[0] * extents[1] * extents[2]; }
  std::size_t index(std::size_t l, std::size_t w, std::size_t h) const {
    return (l * extents[1] + w) * extents[2] + h;
  }
  Label& at(std::size_t l, std::size_t w, std::size_t h) { return labels[index(l, w, h)]; }
  Label at(std::size_t l, std::size_t w, std::size_t h) const { return labels[index(l, w, h)]; }

  void validate(std::size_t factor = 1) const {
    if (labels.size() != volume()) throw ShapeError("label count does not match grid extents");
    for (Label l : labels) {
      if (l >= classes) throw std::out_of_range("label " + std::to_string(l) + " >= class count");
    }
    for (auto e : extents) {
      if (e == 0 || e % factor != 0) {
        throw ShapeError("grid extent " + std::to_string(e) + " not divisible by " + std::to_string(factor));
      }
    }
  }

  bool operator==(const VoxelGrid&) const = default;
};

// VOXL: "VOXL" | version u32 | C u32 | L u32 | W u32 | H u32 | voxel_size f32 |
//       L*W*H label bytes, row-major (l, w, h).
inline constexpr std::uint32_t kVoxelFormatVersion = 1;

inline std::string encode_voxel_grid(const VoxelGrid& grid) {
  grid.validate();
  std::string buf = "VOXL";
  detail::put<std::uint32_t>(buf, kVoxelFormatVersion);
  detail::put<std::uint32_t>(buf, grid.classes);
  for (auto e : grid.extents) detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(e));
  detail::put<float>(buf, grid.voxel_size);
  buf.append(reinterpret_cast<const char*>(grid.labels.data()), grid.labels.size());
  return buf;
}

inline VoxelGrid decode_voxel_grid(const std::string& bytes) {
  detail::Reader r(bytes);
  if (r.bytes(4) != "VOXL") throw FormatError("bad voxel grid magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kVoxelFormatVersion) throw FormatError("unsupported voxel grid version");
  VoxelGrid grid;
  grid.classes = r.get<std::uint32_t>();
  for (auto& e : grid.extents) e = r.get<std::uint32_t>();
  grid.voxel_size = r.get<float>();
  const std::string raw = r.bytes(grid.volume());
  grid.labels.assign(raw.begin(), raw.end());
  if (!r.done()) throw FormatError("trailing bytes after voxel labels");
  grid.validate();
  return grid;
}

inline void save_voxel_grid(const std::string& path, const VoxelGrid& grid) {
  detail::write_file(path, encode_voxel_grid(grid));
}
inline VoxelGrid load_voxel_grid(const std::string& path) {
  return decode_voxel_grid(detail::read_file(path));
}

/// C x L x W x H indicator volume.
template <typename T>
Tensor<T> one_hot(const VoxelGrid& grid) {
  const std::size_t V = grid.volume();
  std::vector<T> data(grid.classes * V, T(0));
  for (std::size_t v = 0; v < V; ++v) data[grid.labels[v] * V + v] = T(1);
  return Tensor<T>({grid.classes, grid.extents[0], grid.extents[1], grid.extents[2]}, std::move(data));
}

/// Argmax over the channel axis of a C x L x W x H logit (or probability) volume.
template <typename T>
VoxelGrid argmax_labels(const Tensor<T>& logits, float voxel_size = 0.2f) {
  const std::size_t C = logits.extent(0);
  VoxelGrid grid({logits.extent(1), logits.extent(2), logits.extent(3)}, static_cast<std::uint32_t>(C),
                 voxel_size);
  const std::size_t V = grid.volume();
  for (std::size_t v = 0; v < V; ++v) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c) {
      if (logits[c * V + v] > logits[best * V + v]) best = c;
    }
    grid.labels[v] = static_cast<Label>(best);
  }
  return grid;
}

inline constexpr std::size_t kLatentFactor = 4;

template <typename T>
struct LatentRep {
  Tensor<T> mean;     // c_lat x l x w x h
  Tensor<T> log_var;
  Tensor<T> z;
};

struct VaeConfig {
  std::size_t classes = 5;
  std::vector<std::size_t> channels{16, 32};  // widths after each downsampling stage
  std::size_t latent_channels = 8;
};

/// Shared encoder topology: stem conv, two stride-2 residual downsampling
/// stages (factor 4), 1x1x1 heads.
template <typename T>
class LatentEncoder {
 public:
  LatentEncoder() = default;
  LatentEncoder(const Scope<T>& scope, std::size_t in_channels, const std::vector<std::size_t>& channels,
                std::size_t out_channels, bool variance_head) {
    if (channels.size() != 2) throw std::invalid_argument("encoder needs exactly two stage widths");
    stem_ = Conv3d<T>::same(scope.sub("stem"), in_channels, channels[0], 3);
    down0_ = DownsampleBlock<T>(scope.sub("down0"), channels[0], channels[0]);
    down1_ = DownsampleBlock<T>(scope.sub("down1"), channels[0], channels[1]);
    head_ = Conv3d<T>(scope.sub("head"), channels[1], out_channels, {1, 1, 1}, {});
    if (variance_head) {
      const Scope<T> s = scope.sub("log_var");
      ConvGeometry g;
      var_head_.weight = s.weight("weight", {out_channels, channels[1], 1, 1, 1}, channels[1], T(0.1));
      var_head_.bias = s.constant("bias", {out_channels}, T(-6));
      var_head_.geom = g;
    }
  }

  Tensor<T> features(const Tensor<T>& x) const {
    for (std::size_t a = 1; a < 4; ++a) {
      if (x.extent(a) % kLatentFactor != 0) {
        throw ShapeError("input " + shape_str(x.shape()) + " is incompatible with factor-4 reduction");
      }
    }
    return down1_(down0_(leaky_relu(stem_(x), T(kLeakySlope))));
  }
  Tensor<T> head(const Tensor<T>& feat) const { return head_(feat); }
  Tensor<T> log_var(const Tensor<T>& feat) const { return var_head_(feat); }

 private:
  Conv3d<T> stem_;
  DownsampleBlock<T> down0_, down1_;
  Conv3d<T> head_, var_head_;
};

template <typename T>
class VoxelVae {
 public:
  VoxelVae(ParamStore<T>& store, Rng& init_rng, const VaeConfig& cfg) : cfg_(cfg) {
    Scope<T> root(store, init_rng);
    encoder_ = LatentEncoder<T>(root.sub("encoder"), cfg.classes, cfg.channels, cfg.latent_channels, true);
    const Scope<T> dec = root.sub("decoder");
    dec_in_ = Conv3d<T>::same(dec.sub("stem"), cfg.latent_channels, cfg.channels[1], 3);
    up0_ = UpsampleBlock<T>(dec.sub("up0"), cfg.channels[1], cfg.channels[0]);
    up1_ = UpsampleBlock<T>(dec.sub("up1"), cfg.channels[0], cfg.channels[0]);
    head_ = Conv3d<T>(dec.sub("head"), cfg.channels[0], cfg.classes, {1, 1, 1}, {});
  }

  const VaeConfig& config() const { return cfg_; }

  /// Reparameterized encoding; `rng == nullptr` selects the deterministic mode
  /// (z = mean).
  LatentRep<T> encode(const VoxelGrid& grid, Rng* rng = nullptr) const {
    grid.validate(kLatentFactor);
    if (grid.classes != cfg_.classes) throw std::invalid_argument("grid class count differs from VAE");
    return encode_volume(one_hot<T>(grid), rng);
  }

  LatentRep<T> encode_volume(const Tensor<T>& volume, Rng* rng = nullptr) const {
    Tensor<T> feat = encoder_.features(volume);
    LatentRep<T> rep{encoder_.head(feat), encoder_.log_var(feat), {}};
    if (!rng) {
      rep.z = rep.mean;
      return rep;
    }
    std::vector<T> eta(rep.mean.size());
    for (auto& e : eta) e = standard_normal<T>(*rng);
    Tensor<T> noise(rep.mean.shape(), std::move(eta));
    rep.z = add(rep.mean, mul(exp(mul_scalar(rep.log_var, T(0.5))), noise));
    return rep;
  }

  /// Class logits at 4x the latent extents.
  Tensor<T> decode(const Tensor<T>& z) const {
    if (z.rank() != 4 || z.extent(0) != cfg_.latent_channels) {
      throw ShapeError("latent " + shape_str(z.shape()) + " does not match " +
                       std::to_string(cfg_.latent_channels) + " latent channels");
    }
    Tensor<T> y = leaky_relu(dec_in_(z), T(kLeakySlope));
    return head_(up1_(up0_(y)));
  }

 private:
  VaeConfig cfg_;
  LatentEncoder<T> encoder_;
  Conv3d<T> dec_in_;
  UpsampleBlock<T> up0_, up1_;
  Conv3d<T> head_;
};

/// Maps feature volumes into the latent geometry with the encoder topology.
template <typename T>
class ConditionNetwork {
 public:
  ConditionNetwork() = default;
  ConditionNetwork(const Scope<T>& scope, std::size_t in_channels, const std::vector<std::size_t>& channels,
                   std::size_t out_channels)
      : encoder_(scope, in_channels, channels, out_channels, false) {}

  Tensor<T> operator()(const Tensor<T>& features) const { return encoder_.head(encoder_.features(features)); }

 private:
  LatentEncoder<T> encoder_;
};

}  // namespace skimba
