#pragma once

#include <array>
#include <chrono>

#include "skimba/diffusion.hpp"
#include "skimba/scan.hpp"
#include "skimba/vae.hpp"

namespace skimba {

using Vec3 = std::array<double, 3>;

inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline Vec3 normalized(const Vec3& v) {
  const double n = std::sqrt(dot(v, v));
  return {v[0] / n, v[1] / n, v[2] / n};
}

/// Pinhole camera. World coordinates are metres in the grid frame (l, w, h
/// axes); camera frame is x right, y down, z forward. Pixel (row, col) has its
/// centre at image coordinates (u = col, v = row).
struct CameraModel {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  std::size_t rows = 0, cols = 0;
  std::array<Vec3, 3> rotation{};  // rows of the world -> camera rotation
  Vec3 translation{};

  void validate() const {
    if (!(fx > 0) || !(fy > 0)) throw std::invalid_argument("camera focal lengths must be positive");
    if (rows == 0 || cols == 0) throw std::invalid_argument("camera image extents must be positive");
  }

  static CameraModel look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double focal,
                             std::size_t rows, std::size_t cols) {
    CameraModel cam;
    cam.fx = cam.fy = focal;
    cam.cx = (static_cast<double>(cols) - 1.0) / 2.0;
    cam.cy = (static_cast<double>(rows) - 1.0) / 2.0;
    cam.rows = rows;
    cam.cols = cols;
    const Vec3 forward = normalized(target - eye);
    const Vec3 right = normalized(cross(forward, up));
    const Vec3 down = cross(forward, right);
    cam.rotation = {right, down, forward};
    cam.translation = {-dot(right, eye), -dot(down, eye), -dot(forward, eye)};
    return cam;
  }

  Vec3 to_camera(const Vec3& p) const {
    return {dot(rotation[0], p) + translation[0], dot(rotation[1], p) + translation[1],
            dot(rotation[2], p) + translation[2]};
  }
  Vec3 eye() const {
    // -R^T t
    Vec3 e{};
    for (int i = 0; i < 3; ++i)
      for (int k = 0; k < 3; ++k) e[i] -= rotation[k][i] * translation[k];
    return e;
  }
  /// World-frame direction of the ray through image point (u, v).
  Vec3 ray(double u, double v) const {
    const Vec3 c{(u - cx) / fx, (v - cy) / fy, 1.0};
    Vec3 d{};
    for (int i = 0; i < 3; ++i)
      for (int k = 0; k < 3; ++k) d[i] += rotation[k][i] * c[k];
    return normalized(d);
  }
};

inline Vec3 voxel_center(std::size_t l, std::size_t w, std::size_t h, double voxel_size) {
  return {(static_cast<double>(l) + 0.5) * voxel_size, (static_cast<double>(w) + 0.5) * voxel_size,
          (static_cast<double>(h) + 0.5) * voxel_size};
}

/// Bilinear lifting weights from an image plane to voxel centres.
template <typename T>
std::vector<ResampleEntry<T>> projection_entries(const CameraModel& cam, const Triple& grid, double voxel_size) {
  cam.validate();
  std::vector<ResampleEntry<T>> entries;
  const double max_u = static_cast<double>(cam.cols - 1);
  const double max_v = static_cast<double>(cam.rows - 1);
  for (std::size_t l = 0; l < grid[0]; ++l)
    for (std::size_t w = 0; w < grid[1]; ++w)
      for (std::size_t h = 0; h < grid[2]; ++h) {
        const Vec3 pc = cam.to_camera(voxel_center(l, w, h, voxel_size));
        if (pc[2] <= 1e-9) continue;
        const double u = cam.fx * pc[0] / pc[2] + cam.cx;
        const double v = cam.fy * pc[1] / pc[2] + cam.cy;
        if (!(u >= 0.0 && u <= max_u && v >= 0.0 && v <= max_v)) continue;
        const std::size_t dst = (l * grid[1] + w) * grid[2] + h;
        const std::size_t u0 = std::min(static_cast<std::size_t>(u), cam.cols > 1 ? cam.cols - 2 : 0);
        const std::size_t v0 = std::min(static_cast<std::size_t>(v), cam.rows > 1 ? cam.rows - 2 : 0);
        const double fu = cam.cols > 1 ? u - static_cast<double>(u0) : 0.0;
        const double fv = cam.rows > 1 ? v - static_cast<double>(v0) : 0.0;
        const std::size_t u1 = cam.cols > 1 ? u0 + 1 : u0;
        const std::size_t v1 = cam.rows > 1 ? v0 + 1 : v0;
        const std::array<std::pair<std::size_t, double>, 4> taps{{{v0 * cam.cols + u0, (1 - fu) * (1 - fv)},
                                                                 {v0 * cam.cols + u1, fu * (1 - fv)},
                                                                 {v1 * cam.cols + u0, (1 - fu) * fv},
                                                                 {v1 * cam.cols + u1, fu * fv}}};
        for (const auto& [src, wgt] : taps) {
          if (wgt != 0.0) entries.push_back({dst, src, static_cast<T>(wgt)});
        }
      }
  return entries;
}

/// Lifts a C x rows x cols feature map into a C x L x W x H volume; voxels
/// behind the camera or outside the image receive zeros.
template <typename T>
Tensor<T> project_2d_to_3d(const Tensor<T>& features, const CameraModel& cam, const Triple& grid,
                           double voxel_size) {
  if (features.rank() != 3 || features.extent(1) != cam.rows || features.extent(2) != cam.cols) {
    throw ShapeError("feature map " + shape_str(features.shape()) + " does not match camera image extents");
  }
  auto entries = std::make_shared<const std::vector<ResampleEntry<T>>>(projection_entries<T>(cam, grid, voxel_size));
  return resample(features, entries, Shape{features.extent(0), grid[0], grid[1], grid[2]});
}

// ---------------------------------------------------------------------------

/// Architecture description shared by the networks of one pipeline.
struct NetworkSpec {
  std::size_t classes = 5;
  Triple grid{32, 32, 8};
  double voxel_size = 0.2;
  std::size_t image_rows = 24;
  std::size_t image_cols = 48;
  std::vector<std::size_t> channels{16, 32};  // per encoder stage; stage count = size
  std::size_t latent_channels = 8;
  std::size_t condition_channels = 4;  // per condition network
  std::size_t feature_channels = 8;    // D
  std::size_t extractor_depth = 1;
  std::size_t state_size = 8;
  bool use_mscb = true;
  bool use_sb = true;
  bool use_skimba = true;

  Triple latent_extents() const {
    return {grid[0] / kLatentFactor, grid[1] / kLatentFactor, grid[2] / kLatentFactor};
  }
  /// The VAE and condition encoders always use the first two stage widths.
  VaeConfig vae() const { return {classes, {channels.at(0), channels.at(1)}, latent_channels}; }

  void validate() const {
    if (classes < 2 || classes > 256) throw std::invalid_argument("class count must be in [2, 256]");
    if (channels.size() < 2) throw std::invalid_argument("channel schedule needs at least two stages");
    for (auto c : channels) {
      if (c == 0) throw std::invalid_argument("stage widths must be positive");
    }
    for (auto e : grid) {
      if (e == 0 || e % kLatentFactor != 0) throw std::invalid_argument("grid extents must be positive multiples of 4");
    }
    if (!(voxel_size > 0)) throw std::invalid_argument("voxel size must be positive");
    if (image_rows < 2 || image_cols < 2) throw std::invalid_argument("image extents must be at least 2");
    if (latent_channels == 0 || condition_channels == 0 || feature_channels == 0 || state_size == 0) {
      throw std::invalid_argument("latent, condition, feature and state widths must be positive");
    }
    // The denoiser must halve the latent cleanly once per stage.
    Triple ext = latent_extents();
    for (std::size_t s = 0; s < channels.size(); ++s) ext = apply_stride(ext, halving_stride(ext));
  }
};

/// Image -> 2-D conv stack -> lifting -> alternating MSCB / DDR stages.
template <typename T>
class FeatureExtractor {
 public:
  struct Output {
    Tensor<T> projected;  // lifted 2-D features
    Tensor<T> features;   // after the 3-D stages
  };

  FeatureExtractor() = default;
  FeatureExtractor(const Scope<T>& scope, const NetworkSpec& spec) : spec_(spec) {
    const std::size_t D = spec.feature_channels;
    const Triple k2{3, 3, 1};
    image0_ = Conv3d<T>(scope.sub("image0"), 3, D, k2, ConvGeometry::same(k2));
    image1_ = Conv3d<T>(scope.sub("image1"), D, D, k2, ConvGeometry::same(k2));
    for (std::size_t i = 0; i < spec.extractor_depth; ++i) {
      const Scope<T> stage = scope.sub("stage" + std::to_string(i));
      if (spec.use_mscb) {
        mscb_.emplace_back(stage.sub("mscb"), D, D, 5);
      } else {
        plain_.push_back(Conv3d<T>::same(stage.sub("plain"), D, D, 3));
      }
      ddr_.emplace_back(stage.sub("ddr"), BlockConfig{D, D, 3, {1}, 1}, 1);
    }
  }

  Output operator()(const Tensor<T>& image, const CameraModel& cam) const {
    if (image.rank() != 3 || image.extent(0) != 3) {
      throw ShapeError("image must be 3 x rows x cols, got " + shape_str(image.shape()));
    }
    const std::size_t rows = image.extent(1), cols = image.extent(2);
    Tensor<T> x = reshape(image, Shape{3, rows, cols, 1});
    x = leaky_relu(image0_(x), T(kLeakySlope));
    x = leaky_relu(image1_(x), T(kLeakySlope));
    Tensor<T> lifted = project_2d_to_3d(reshape(x, Shape{spec_.feature_channels, rows, cols}), cam,
                                        spec_.grid, spec_.voxel_size);
    Tensor<T> y = lifted;
    for (std::size_t i = 0; i < spec_.extractor_depth; ++i) {
      y = leaky_relu(spec_.use_mscb ? mscb_[i](y) : plain_[i](y), T(kLeakySlope));
      y = ddr_[i](y);
    }
    return {lifted, y};
  }

 private:
  NetworkSpec spec_;
  Conv3d<T> image0_, image1_;
  std::vector<Mscb<T>> mscb_;
  std::vector<Conv3d<T>> plain_;
  std::vector<DdrBlock<T>> ddr_;
};

/// Semantic block output averaged over its branches so stacked blocks keep
/// unit activation scale.
template <typename T>
Tensor<T> semantic_stage(const SemanticBlock<T>& sb, const Tensor<T>& x) {
  return mul_scalar(sb(x), T(1) / static_cast<T>(sb.branches().size()));
}

inline SkimbaConfig skimba_config(const NetworkSpec& spec, std::size_t channels) {
  SkimbaConfig cfg;
  cfg.channels = channels;
  cfg.state = spec.state_size;
  return cfg;
}

/// eps_theta: MSCB fuse, then an encoder of [down -> SB -> Skimba] stages, a
/// ConvResblock bottleneck and a mirrored [up -> SB -> Skimba] decoder. Each
/// encoder stage input reaches the matching decoder stage through a
/// ConvResblock. A 1x1x1 head returns to the latent width.
template <typename T>
class Denoiser {
 public:
  Denoiser() = default;
  Denoiser(const Scope<T>& scope, const NetworkSpec& spec, std::size_t condition_channels)
      : spec_(spec) {
    if (spec.channels.empty()) throw std::invalid_argument("denoiser needs at least one stage");
    const std::size_t c0 = spec.channels[0];
    fuse_ = MscbFuse<T>(scope.sub("fuse"), spec.latent_channels, condition_channels, c0, spec.use_mscb);
    Triple extents = spec.latent_extents();
    std::size_t prev = c0;
    for (std::size_t s = 0; s < spec.channels.size(); ++s) {
      Stage st;
      const Scope<T> sc = scope.sub("enc" + std::to_string(s));
      st.stride = halving_stride(extents);
      extents = apply_stride(extents, st.stride);
      st.in_channels = prev;
      st.residue = ConvResBlock<T>(sc.sub("residue"), prev);
      st.down = DownsampleBlock<T>(sc.sub("down"), prev, spec.channels[s], st.stride);
      if (spec.use_sb) st.enc_sb = SemanticBlock<T>(sc.sub("sb"), spec.channels[s]);
      if (spec.use_skimba) st.enc_skimba = SkimbaBlock<T>(sc.sub("skimba"), skimba_config(spec, spec.channels[s]));
      const Scope<T> dc = scope.sub("dec" + std::to_string(s));
      st.up = UpsampleBlock<T>(dc.sub("up"), spec.channels[s], prev, st.stride);
      if (spec.use_sb) st.dec_sb = SemanticBlock<T>(dc.sub("sb"), prev);
      if (spec.use_skimba) st.dec_skimba = SkimbaBlock<T>(dc.sub("skimba"), skimba_config(spec, prev));
      stages_.push_back(std::move(st));
      prev = spec.channels[s];
    }
    bottleneck_ = ConvResBlock<T>(scope.sub("bottleneck"), prev);
    head_ = Conv3d<T>(scope.sub("head"), c0, spec.latent_channels, {1, 1, 1}, {}, true);
  }

  Tensor<T> operator()(const Tensor<T>& x_t, std::size_t t, const Tensor<T>& condition) const {
    const Triple lat = spec_.latent_extents();
    if (x_t.rank() != 4 || x_t.extent(1) != lat[0] || x_t.extent(2) != lat[1] || x_t.extent(3) != lat[2]) {
      throw ShapeError("noisy latent " + shape_str(x_t.shape()) + " does not match latent geometry");
    }
    Tensor<T> y = fuse_(x_t, condition, t);
    std::vector<Tensor<T>> residues;
    for (const auto& st : stages_) {
      residues.push_back(st.residue(y));
      y = st.down(y);
      if (spec_.use_sb) y = semantic_stage(st.enc_sb, y);
      if (spec_.use_skimba) y = st.enc_skimba(y);
    }
    y = bottleneck_(y);
    for (std::size_t s = stages_.size(); s-- > 0;) {
      const auto& st = stages_[s];
      y = add(st.up(y), residues[s]);
      if (spec_.use_sb) y = semantic_stage(st.dec_sb, y);
      if (spec_.use_skimba) y = st.dec_skimba(y);
    }
    return head_(y);
  }

  std::size_t skimba_count() const { return spec_.use_skimba ? 2 * stages_.size() : 0; }

 private:
  struct Stage {
    Triple stride{2, 2, 2};
    std::size_t in_channels = 0;
    ConvResBlock<T> residue;
    DownsampleBlock<T> down;
    SemanticBlock<T> enc_sb, dec_sb;
    SkimbaBlock<T> enc_skimba, dec_skimba;
    UpsampleBlock<T> up;
  };

  NetworkSpec spec_;
  MscbFuse<T> fuse_;
  std::vector<Stage> stages_;
  ConvResBlock<T> bottleneck_;
  Conv3d<T> head_;
};

/// Encoder-decoder over class-probability volumes with concatenated skip
/// connections and a single Skimba block in front of the decoder.
template <typename T>
class Segmenter {
 public:
  Segmenter() = default;
  Segmenter(const Scope<T>& scope, const NetworkSpec& spec) : spec_(spec) {
    if (spec.channels.empty()) throw std::invalid_argument("segmenter needs at least one stage");
    const std::size_t c0 = spec.channels[0];
    stem_ = Conv3d<T>::same(scope.sub("stem"), spec.classes, c0, 3);
    Triple extents = spec.grid;
    std::size_t prev = c0;
    for (std::size_t s = 0; s < spec.channels.size(); ++s) {
      Stage st;
      st.stride = halving_stride(extents);
      extents = apply_stride(extents, st.stride);
      const Scope<T> sc = scope.sub("enc" + std::to_string(s));
      st.down = DownsampleBlock<T>(sc.sub("down"), prev, spec.channels[s], st.stride);
      if (spec.use_sb) st.enc_sb = SemanticBlock<T>(sc.sub("sb"), spec.channels[s]);
      const Scope<T> dc = scope.sub("dec" + std::to_string(s));
      st.up = UpsampleBlock<T>(dc.sub("up"), spec.channels[s], prev, st.stride);
      st.merge = Conv3d<T>(dc.sub("merge"), 2 * prev, prev, {1, 1, 1}, {});
      if (spec.use_sb) st.dec_sb = SemanticBlock<T>(dc.sub("sb"), prev);
      stages_.push_back(std::move(st));
      prev = spec.channels[s];
    }
    if (spec.use_skimba) skimba_ = SkimbaBlock<T>(scope.sub("bottleneck/skimba"), skimba_config(spec, prev));
    head_ = Conv3d<T>(scope.sub("head"), c0, spec.classes, {1, 1, 1}, {});
  }

  /// C x L x W x H class logits.
  Tensor<T> operator()(const Tensor<T>& input) const {
    if (input.rank() != 4 || input.extent(0) != spec_.classes) {
      throw ShapeError("segmenter input " + shape_str(input.shape()) + " must have " +
                       std::to_string(spec_.classes) + " channels");
    }
    Tensor<T> y = leaky_relu(stem_(input), T(kLeakySlope));
    std::vector<Tensor<T>> skips;
    for (const auto& st : stages_) {
      skips.push_back(y);
      y = st.down(y);
      if (spec_.use_sb) y = semantic_stage(st.enc_sb, y);
    }
    if (spec_.use_skimba) y = skimba_(y);
    for (std::size_t s = stages_.size(); s-- > 0;) {
      const auto& st = stages_[s];
      y = st.merge(concat<T>({st.up(y), skips[s]}, 0));
      if (spec_.use_sb) y = semantic_stage(st.dec_sb, y);
    }
    return head_(y);
  }

 private:
  struct Stage {
    Triple stride{2, 2, 2};
    DownsampleBlock<T> down;
    SemanticBlock<T> enc_sb, dec_sb;
    UpsampleBlock<T> up;
    Conv3d<T> merge;
  };

  NetworkSpec spec_;
  Conv3d<T> stem_;
  std::vector<Stage> stages_;
  SkimbaBlock<T> skimba_;
  Conv3d<T> head_;
};

/// Feature extractor, the two condition networks and the denoiser: every
/// network trained by the diffusion objective.
template <typename T>
class CompletionNetwork {
 public:
  CompletionNetwork(ParamStore<T>& store, Rng& init_rng, const NetworkSpec& spec) : spec_(spec) {
    Scope<T> root(store, init_rng);
    const std::vector<std::size_t> widths = spec.vae().channels;
    extractor_ = FeatureExtractor<T>(root.sub("extractor"), spec);
    cond_geometry_ = ConditionNetwork<T>(root.sub("condition/geometry"), spec.feature_channels, widths,
                                         spec.condition_channels);
    cond_image_ = ConditionNetwork<T>(root.sub("condition/image"), spec.feature_channels, widths,
                                      spec.condition_channels);
    denoiser_ = Denoiser<T>(root.sub("denoiser"), spec, 2 * spec.condition_channels);
  }

  const NetworkSpec& spec() const { return spec_; }

  typename FeatureExtractor<T>::Output extract(const Tensor<T>& image, const CameraModel& cam) const {
    return extractor_(image, cam);
  }

  /// Concatenated outputs of both condition networks, in latent geometry.
  Tensor<T> condition(const typename FeatureExtractor<T>::Output& feats) const {
    return concat<T>({cond_geometry_(feats.features), cond_image_(feats.projected)}, 0);
  }

  Tensor<T> condition(const Tensor<T>& image, const CameraModel& cam) const { return condition(extract(image, cam)); }

  Tensor<T> predict_noise(const Tensor<T>& x_t, std::size_t t, const Tensor<T>& cond) const {
    return denoiser_(x_t, t, cond);
  }

  EpsilonModel<T> epsilon_model() const {
    return [this](const Tensor<T>& x_t, std::size_t t, const Tensor<T>& cond) { return denoiser_(x_t, t, cond); };
  }

 private:
  NetworkSpec spec_;
  FeatureExtractor<T> extractor_;
  ConditionNetwork<T> cond_geometry_, cond_image_;
  Denoiser<T> denoiser_;
};

// ---------------------------------------------------------------------------
// Full pipeline.

struct StageTimes {
  double fe = 0, cn = 0, vae = 0, sd = 0, ss = 0, fm = 0;  // seconds
};

template <typename T>
struct PipelineResult {
  VoxelGrid prediction;
  VoxelGrid completion;  // decoded diffusion sample before segmentation
  Tensor<T> latent;
  StageTimes times;
};

template <typename T>
class Pipeline {
 public:
  Pipeline(const VoxelVae<T>& vae, const CompletionNetwork<T>& completion, const Segmenter<T>& segmenter,
           NoiseSchedule schedule, T latent_scale)
      : vae_(vae), completion_(completion), segmenter_(segmenter), schedule_(std::move(schedule)),
        latent_scale_(latent_scale) {}

  PipelineResult<T> operator()(const Tensor<T>& image, const CameraModel& cam, Rng& rng) const {
    using Clock = std::chrono::steady_clock;
    auto seconds = [](Clock::time_point a, Clock::time_point b) {
      return std::chrono::duration<double>(b - a).count();
    };
    NoGradGuard no_grad;
    PipelineResult<T> r;
    const auto t0 = Clock::now();
    auto feats = completion_.extract(image, cam);
    const auto t1 = Clock::now();
    Tensor<T> cond = completion_.condition(feats);
    const auto t2 = Clock::now();
    const NetworkSpec& spec = completion_.spec();
    const Triple lat = spec.latent_extents();
    Tensor<T> scaled = sample(completion_.epsilon_model(), schedule_,
                              Shape{spec.latent_channels, lat[0], lat[1], lat[2]}, cond, rng);
    r.latent = mul_scalar(scaled, T(1) / latent_scale_);
    const auto t3 = Clock::now();
    Tensor<T> logits = vae_.decode(r.latent);
    r.completion = argmax_labels(logits, static_cast<float>(spec.voxel_size));
    Tensor<T> probs = softmax(logits, 0);
    const auto t4 = Clock::now();
    r.prediction = argmax_labels(segmenter_(probs), static_cast<float>(spec.voxel_size));
    const auto t5 = Clock::now();
    r.times = {seconds(t0, t1), seconds(t1, t2), seconds(t3, t4), seconds(t2, t3), seconds(t4, t5), seconds(t0, t5)};
    return r;
  }

  const NoiseSchedule& schedule() const { return schedule_; }

 private:
  const VoxelVae<T>& vae_;
  const CompletionNetwork<T>& completion_;
  const Segmenter<T>& segmenter_;
  NoiseSchedule schedule_;
  T latent_scale_;
};

}  // namespace skimba
