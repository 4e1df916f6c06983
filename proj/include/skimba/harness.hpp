#pragma once

#include <atomic>
#include <filesystem>
#include <iomanip>
#include <mutex>
#include <thread>

#include <nlohmann/json.hpp>

#include "skimba/config.hpp"

namespace skimba {

namespace fs = std::filesystem;

// Independent random streams derived from the root seed.
enum class Stream : std::uint64_t {
  data = 1,
  vae_init,
  vae_train,
  completion_init,
  diffusion_train,
  seg_init,
  seg_train,
  sampling,
  baseline,
};

inline std::uint64_t stream_seed(std::uint64_t root, Stream s) {
  return derive_seed(root, static_cast<std::uint64_t>(s));
}

/// Worker threads for scene-parallel work, capped by SKIMBA_THREADS.
inline std::size_t worker_count() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("SKIMBA_THREADS"); env && *env) {
    std::size_t cap = 0;
    const std::string s(env);
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), cap);
    if (ec != std::errc() || p != s.data() + s.size() || cap == 0) {
      throw ConfigError("SKIMBA_THREADS must be a positive integer, got '" + s + "'");
    }
    n = std::min(n, cap);
  }
  return n;
}

template <typename Fn>
void parallel_for(std::size_t count, Fn&& fn) {
  const std::size_t workers = std::min(worker_count(), count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------
// Dataset.

enum class Split : std::uint64_t { train = 0, val = 1, test = 2 };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    default: return "test";
  }
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "'");
}

struct Dataset {
  std::vector<SyntheticScene> train, val, test;

  const std::vector<SyntheticScene>& split(Split s) const {
    return s == Split::train ? train : s == Split::val ? val : test;
  }
  std::vector<SyntheticScene>& split(Split s) { return s == Split::train ? train : s == Split::val ? val : test; }
};

inline std::uint64_t scene_seed(std::uint64_t root, Split split, std::size_t index) {
  return derive_seed(derive_seed(stream_seed(root, Stream::data), static_cast<std::uint64_t>(split)), index);
}

inline std::vector<SyntheticScene> generate_split(const RunConfig& cfg, std::uint64_t root, Split split,
                                                  std::size_t count) {
  std::vector<SyntheticScene> out(count);
  const SceneConfig sc = cfg.scene();
  parallel_for(count, [&](std::size_t i) { out[i] = generate_scene(scene_seed(root, split, i), sc); });
  return out;
}

inline Dataset generate_dataset(const RunConfig& cfg, std::uint64_t root) {
  Dataset d;
  d.train = generate_split(cfg, root, Split::train, cfg.train_scenes);
  d.val = generate_split(cfg, root, Split::val, cfg.val_scenes);
  d.test = generate_split(cfg, root, Split::test, cfg.test_scenes);
  return d;
}

inline std::string scene_file_name(std::size_t index) {
  std::ostringstream o;
  o << "scene_" << std::setw(5) << std::setfill('0') << index << ".voxl";
  return o.str();
}

/// <dir>/<split>/scene_NNNNN.voxl plus <dir>/manifest.csv (split,index,seed,file).
inline void save_dataset(const Dataset& d, const fs::path& dir) {
  fs::create_directories(dir);
  std::ostringstream manifest;
  manifest << "split,index,seed,file\n";
  for (Split s : {Split::train, Split::val, Split::test}) {
    const auto& scenes = d.split(s);
    if (scenes.empty()) continue;
    fs::create_directories(dir / split_name(s));
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      const std::string rel = std::string(split_name(s)) + "/" + scene_file_name(i);
      save_voxel_grid((dir / rel).string(), scenes[i].grid);
      manifest << split_name(s) << "," << i << "," << scenes[i].seed << "," << rel << "\n";
    }
  }
  detail::write_file((dir / "manifest.csv").string(), manifest.str());
}

/// Reloads grids and re-renders images with the configured camera.
inline Dataset load_dataset(const fs::path& dir, const RunConfig& cfg) {
  std::istringstream in(detail::read_file((dir / "manifest.csv").string()));
  std::string line;
  std::getline(in, line);
  if (detail::trim(line) != "split,index,seed,file") throw FormatError("bad dataset manifest header");
  Dataset d;
  const SceneConfig sc = cfg.scene();
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string item; std::getline(ss, item, ',');) f.push_back(detail::trim(item));
    if (f.size() != 4) throw FormatError("bad manifest line: " + line);
    auto& split = d.split(parse_split(f[0]));
    const auto index = detail::parse_number<std::size_t>("index", f[1]);
    if (index != split.size()) throw FormatError("manifest indices must be consecutive per split");
    VoxelGrid g = load_voxel_grid((dir / f[3]).string());
    if (g.extents != sc.grid || g.classes != sc.classes) {
      throw ConfigError("dataset grid " + f[3] + " does not match the configured geometry");
    }
    split.push_back(make_scene(detail::parse_number<std::uint64_t>("seed", f[2]), std::move(g), sc));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Models.

struct VaeModel {
  ParamStore<float> store;
  std::unique_ptr<VoxelVae<float>> net;

  VaeModel(const NetworkSpec& spec, std::uint64_t init_seed) {
    Rng rng(init_seed);
    net = std::make_unique<VoxelVae<float>>(store, rng, spec.vae());
  }
};

struct CompletionModel {
  ParamStore<float> store;
  std::unique_ptr<CompletionNetwork<float>> net;
  float latent_scale = 1.0f;  // multiplies VAE latents into the diffusion space

  CompletionModel(const NetworkSpec& spec, std::uint64_t init_seed) {
    Rng rng(init_seed);
    net = std::make_unique<CompletionNetwork<float>>(store, rng, spec);
  }
};

struct SegModel {
  ParamStore<float> store;
  std::unique_ptr<Segmenter<float>> net;

  SegModel(const NetworkSpec& spec, std::uint64_t init_seed) {
    Rng rng(init_seed);
    Scope<float> root(store, rng);
    net = std::make_unique<Segmenter<float>>(root.sub("segmenter"), spec);
  }
};

struct TrainedModels {
  std::shared_ptr<VaeModel> vae;
  std::shared_ptr<CompletionModel> completion;
  std::shared_ptr<SegModel> seg;
};

inline TrainedModels init_models(const NetworkSpec& spec, std::uint64_t root) {
  return {std::make_shared<VaeModel>(spec, stream_seed(root, Stream::vae_init)),
          std::make_shared<CompletionModel>(spec, stream_seed(root, Stream::completion_init)),
          std::make_shared<SegModel>(spec, stream_seed(root, Stream::seg_init))};
}

// ---------------------------------------------------------------------------
// Checkpoints: <name>.skba holds parameters (plus optimizer moments while
// training); <name>.skba.json holds the step counter and run metadata.

struct CheckpointMeta {
  std::string kind;
  std::size_t step = 0;
  std::size_t total_steps = 0;
  std::uint64_t seed = 0;
  std::string config;
};

inline constexpr const char* kLatentScaleEntry = "meta/latent_scale";

inline void save_stage(const fs::path& path, const std::vector<CheckpointEntry>& entries, const CheckpointMeta& meta) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_checkpoint(path.string(), entries);
  nlohmann::json j{{"kind", meta.kind},
                   {"step", meta.step},
                   {"total_steps", meta.total_steps},
                   {"seed", meta.seed},
                   {"config", meta.config}};
  detail::write_file(path.string() + ".json", j.dump(2) + "\n");
}

inline CheckpointMeta load_meta(const fs::path& path) {
  const std::string text = detail::read_file(path.string() + ".json");
  try {
    const auto j = nlohmann::json::parse(text);
    return {j.at("kind").get<std::string>(), j.at("step").get<std::size_t>(), j.at("total_steps").get<std::size_t>(),
            j.at("seed").get<std::uint64_t>(), j.at("config").get<std::string>()};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad checkpoint metadata " + path.string() + ".json: " + e.what());
  }
}

inline void load_vae(VaeModel& m, const fs::path& path) { assign_entries(m.store, load_checkpoint(path.string())); }

inline void load_completion(CompletionModel& m, const fs::path& path) {
  const auto entries = load_checkpoint(path.string());
  assign_entries(m.store, entries);
  for (const auto& e : entries) {
    if (e.name == kLatentScaleEntry) m.latent_scale = e.values.at(0);
  }
}

inline void load_seg(SegModel& m, const fs::path& path) { assign_entries(m.store, load_checkpoint(path.string())); }

// ---------------------------------------------------------------------------
// Training loop.

struct TrainOptions {
  std::size_t stop_after = 0;                                    // stop once this step count is reached
  std::function<bool(std::size_t step, double loss)> on_step;    // return false to stop early
  std::function<void(const std::string&)> log;
  std::size_t log_every = 50;
};

struct TrainResult {
  std::size_t first_step = 0;
  std::vector<double> losses;  // one per executed step
  std::vector<double> lrs;
};

/// Sequential AdamW loop with a WarmupCosine schedule. Step k draws all its
/// randomness from derive_seed(seed, k) and visits scenes in a per-epoch
/// permutation derived from the seed, so a resumed run is bit-identical.
class StageTrainer {
 public:
  StageTrainer(ParamStore<float>& store, const RunConfig& cfg, const StageTraining& st, std::size_t scenes,
               std::uint64_t seed)
      : store_(&store), optimizer_(store, cfg.adamw(st)), schedule_(cfg.lr_schedule(st, scenes)),
        batch_(st.batch), scenes_(scenes), seed_(seed) {
    if (scenes == 0) throw std::invalid_argument("training needs at least one scene");
  }

  std::size_t step() const { return step_; }
  std::size_t total_steps() const { return schedule_.total_steps; }
  const WarmupCosine& schedule() const { return schedule_; }

  void resume(const std::vector<CheckpointEntry>& entries, std::size_t step) {
    assign_entries(*store_, entries);
    optimizer_.load_state(entries, step);
    step_ = step;
  }

  std::vector<CheckpointEntry> state_entries() const {
    auto out = to_entries(*store_);
    for (auto& e : optimizer_.state_entries()) out.push_back(std::move(e));
    return out;
  }

  std::size_t scene_at(std::size_t position) {
    const std::size_t epoch = position / scenes_;
    if (epoch != perm_epoch_ || perm_.empty()) {
      perm_.resize(scenes_);
      std::iota(perm_.begin(), perm_.end(), std::size_t{0});
      Rng rng(derive_seed(seed_, (std::uint64_t{1} << 40) + epoch));
      for (std::size_t i = scenes_; i > 1; --i) std::swap(perm_[i - 1], perm_[uniform_index(rng, 0, i - 1)]);
      perm_epoch_ = epoch;
    }
    return perm_[position % scenes_];
  }

  /// `loss_fn(scene_index, rng)` returns a scalar loss with a live graph.
  template <typename LossFn>
  TrainResult run(LossFn&& loss_fn, const TrainOptions& opt = {}) {
    TrainResult r;
    r.first_step = step_;
    const std::size_t end = opt.stop_after ? std::min(opt.stop_after, total_steps()) : total_steps();
    while (step_ < end) {
      Rng rng(derive_seed(seed_, step_));
      store_->zero_grad();
      double loss = 0;
      for (std::size_t b = 0; b < batch_; ++b) {
        Tensor<float> l = loss_fn(scene_at(step_ * batch_ + b), rng);
        if (!std::isfinite(l.item())) throw std::runtime_error("non-finite training loss at step " + std::to_string(step_));
        loss += static_cast<double>(l.item()) / static_cast<double>(batch_);
        (batch_ == 1 ? l : mul_scalar(l, 1.0f / static_cast<float>(batch_))).backward();
      }
      const double lr = schedule_(step_);
      optimizer_.step(lr);
      r.losses.push_back(loss);
      r.lrs.push_back(lr);
      ++step_;
      if (opt.log && (step_ % opt.log_every == 0 || step_ == end)) {
        std::ostringstream o;
        o << "step " << step_ << "/" << total_steps() << " loss " << std::setprecision(5) << loss << " lr " << lr;
        opt.log(o.str());
      }
      if (opt.on_step && !opt.on_step(step_, loss)) break;
    }
    store_->zero_grad();
    return r;
  }

 private:
  ParamStore<float>* store_;
  AdamW<float> optimizer_;
  WarmupCosine schedule_;
  std::size_t batch_;
  std::size_t scenes_;
  std::uint64_t seed_;
  std::size_t step_ = 0;
  std::vector<std::size_t> perm_;
  std::size_t perm_epoch_ = 0;
};

inline std::vector<Label> labels_of(const SyntheticScene& s) { return s.grid.labels; }

/// CE + beta * Lovasz on the reconstruction plus the weighted KL term.
inline auto vae_loss(const VaeModel& m, const RunConfig& cfg, const std::vector<SyntheticScene>& scenes) {
  return [&m, &cfg, &scenes](std::size_t i, Rng& rng) {
    const auto rep = m.net->encode(scenes[i].grid, &rng);
    Tensor<float> loss = combined_seg_loss(m.net->decode(rep.z), std::span<const Label>(scenes[i].grid.labels),
                                           static_cast<float>(cfg.lovasz_beta));
    return add(loss, mul_scalar(kl_divergence(rep.mean, rep.log_var), static_cast<float>(cfg.kl_weight)));
  };
}

/// Reconstruction IoU / mIoU of deterministic encode -> decode.
inline std::pair<double, double> vae_reconstruction_metrics(const VaeModel& m, const std::vector<SyntheticScene>& scenes) {
  NoGradGuard no_grad;
  std::vector<ConfusionCounts> occ(scenes.size()), sem(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t i) {
    const VoxelGrid rec = argmax_labels(m.net->decode(m.net->encode(scenes[i].grid).z), scenes[i].grid.voxel_size);
    occ[i] = occupancy_counts(rec.labels, scenes[i].grid.labels);
    sem[i] = ConfusionCounts(scenes[i].grid.classes);
    sem[i].accumulate(rec.labels, scenes[i].grid.labels);
  });
  ConfusionCounts o(2), s(scenes.empty() ? 0 : scenes[0].grid.classes);
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    o.merge(occ[i]);
    s.merge(sem[i]);
  }
  return {completion_iou(o), s.miou()};
}

/// Deterministic-mode latent means of every scene.
inline std::vector<Tensor<float>> encode_latents(const VaeModel& m, const std::vector<SyntheticScene>& scenes) {
  NoGradGuard no_grad;
  std::vector<Tensor<float>> out(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t i) { out[i] = m.net->encode(scenes[i].grid).mean.detach(); });
  return out;
}

/// 1 / RMS over all latent entries, so scaled latents have unit second moment.
inline float latent_scale_of(const std::vector<Tensor<float>>& latents) {
  double sq = 0;
  std::size_t n = 0;
  for (const auto& z : latents) {
    for (float v : z.data()) sq += static_cast<double>(v) * v;
    n += z.size();
  }
  const double rms = n ? std::sqrt(sq / static_cast<double>(n)) : 1.0;
  return rms > 1e-8 ? static_cast<float>(1.0 / rms) : 1.0f;
}

inline auto diffusion_loss(const CompletionModel& m, const NoiseSchedule& schedule,
                           const std::vector<SyntheticScene>& scenes, const std::vector<Tensor<float>>& latents) {
  return [&m, &schedule, &scenes, &latents](std::size_t i, Rng& rng) {
    Tensor<float> cond = m.net->condition(scenes[i].image, scenes[i].camera);
    Tensor<float> x0 = mul_scalar(latents[i], m.latent_scale);
    return denoise_loss(m.net->epsilon_model(), schedule, x0, cond, rng);
  };
}

/// Segmenter input: class probabilities of a VAE decode of the scene latent
/// perturbed by Gaussian noise (`noise` in scaled latent units).
inline Tensor<float> perturbed_completion(const VaeModel& vae, const Tensor<float>& latent, float latent_scale,
                                          double noise, Rng& rng) {
  NoGradGuard no_grad;
  Tensor<float> z = latent;
  if (noise > 0) {
    z = add(z, mul_scalar(gaussian_like<float>(latent.shape(), rng), static_cast<float>(noise) / latent_scale));
  }
  return softmax(vae.net->decode(z), 0).detach();
}

inline auto seg_loss(const SegModel& m, const VaeModel& vae, const RunConfig& cfg,
                     const std::vector<SyntheticScene>& scenes, const std::vector<Tensor<float>>& latents,
                     float latent_scale) {
  return [&m, &vae, &cfg, &scenes, &latents, latent_scale](std::size_t i, Rng& rng) {
    Tensor<float> input = perturbed_completion(vae, latents[i], latent_scale, cfg.seg_latent_noise, rng);
    return combined_seg_loss((*m.net)(input), std::span<const Label>(scenes[i].grid.labels),
                             static_cast<float>(cfg.lovasz_beta));
  };
}

// ---------------------------------------------------------------------------
// Whole-pipeline training.

using Logger = std::function<void(const std::string&)>;

struct PipelineCurves {
  TrainResult vae, diffusion, seg;
};

inline TrainResult train_vae_stage(VaeModel& m, const RunConfig& cfg, const std::vector<SyntheticScene>& train,
                                   std::uint64_t root, const Logger& log = {}) {
  StageTrainer trainer(m.store, cfg, cfg.vae, train.size(), stream_seed(root, Stream::vae_train));
  TrainOptions opt;
  if (log) opt.log = [&](const std::string& s) { log("vae " + s); };
  return trainer.run(vae_loss(m, cfg, train), opt);
}

inline TrainResult train_diffusion_stage(CompletionModel& m, const VaeModel& vae, const RunConfig& cfg,
                                         const std::vector<SyntheticScene>& train, std::uint64_t root,
                                         const Logger& log = {}) {
  const auto latents = encode_latents(vae, train);
  m.latent_scale = latent_scale_of(latents);
  const NoiseSchedule schedule = cfg.schedule();
  StageTrainer trainer(m.store, cfg, cfg.diffusion, train.size(), stream_seed(root, Stream::diffusion_train));
  TrainOptions opt;
  if (log) opt.log = [&](const std::string& s) { log("diffusion " + s); };
  return trainer.run(diffusion_loss(m, schedule, train, latents), opt);
}

inline TrainResult train_seg_stage(SegModel& m, const VaeModel& vae, float latent_scale, const RunConfig& cfg,
                                   const std::vector<SyntheticScene>& train, std::uint64_t root,
                                   const Logger& log = {}) {
  const auto latents = encode_latents(vae, train);
  StageTrainer trainer(m.store, cfg, cfg.seg, train.size(), stream_seed(root, Stream::seg_train));
  TrainOptions opt;
  if (log) opt.log = [&](const std::string& s) { log("seg " + s); };
  return trainer.run(seg_loss(m, vae, cfg, train, latents, latent_scale), opt);
}

/// VAE, then diffusion on the frozen VAE, then the segmenter. A trained VAE
/// can be passed in to share it between runs.
inline TrainedModels train_pipeline(const RunConfig& cfg, const Dataset& data, std::uint64_t root,
                                    std::shared_ptr<VaeModel> vae = nullptr, const Logger& log = {},
                                    PipelineCurves* curves = nullptr) {
  TrainedModels m = init_models(cfg.net, root);
  PipelineCurves local;
  if (vae) {
    m.vae = std::move(vae);
  } else {
    local.vae = train_vae_stage(*m.vae, cfg, data.train, root, log);
  }
  local.diffusion = train_diffusion_stage(*m.completion, *m.vae, cfg, data.train, root, log);
  local.seg = train_seg_stage(*m.seg, *m.vae, m.completion->latent_scale, cfg, data.train, root, log);
  if (curves) *curves = std::move(local);
  return m;
}

// ---------------------------------------------------------------------------
// Evaluation.

struct EvalReport {
  std::size_t classes = 0;
  ConfusionCounts semantic, occupancy;                         // final prediction
  ConfusionCounts completion_semantic, completion_occupancy;   // decoded diffusion sample
  StageTimes mean_times;
  std::vector<VoxelGrid> predictions, completions;

  double iou() const { return completion_iou(occupancy); }
  double miou() const { return semantic.miou(); }
  double completion_stage_iou() const { return completion_iou(completion_occupancy); }
};

inline EvalReport empty_report(std::size_t classes) {
  EvalReport r;
  r.classes = classes;
  r.semantic = r.completion_semantic = ConfusionCounts(classes);
  r.occupancy = r.completion_occupancy = ConfusionCounts(2);
  return r;
}

inline void add_to_report(EvalReport& r, const VoxelGrid& pred, const VoxelGrid& truth) {
  r.semantic.accumulate(pred.labels, truth.labels);
  r.occupancy.merge(occupancy_counts(pred.labels, truth.labels));
}

/// Runs the full pipeline on every scene; sampling for scene i uses
/// derive_seed(seed, i), so results do not depend on thread scheduling.
inline EvalReport evaluate(const TrainedModels& m, const RunConfig& cfg, const std::vector<SyntheticScene>& scenes,
                           std::uint64_t seed, std::optional<NoiseSchedule> schedule = std::nullopt) {
  Pipeline<float> pipeline(*m.vae->net, *m.completion->net, *m.seg->net, schedule ? *schedule : cfg.schedule(),
                           m.completion->latent_scale);
  std::vector<PipelineResult<float>> results(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t i) {
    Rng rng(derive_seed(stream_seed(seed, Stream::sampling), i));
    results[i] = pipeline(scenes[i].image, scenes[i].camera, rng);
  });
  EvalReport r = empty_report(cfg.net.classes);
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    add_to_report(r, results[i].prediction, scenes[i].grid);
    r.completion_semantic.accumulate(results[i].completion.labels, scenes[i].grid.labels);
    r.completion_occupancy.merge(occupancy_counts(results[i].completion.labels, scenes[i].grid.labels));
    const auto& t = results[i].times;
    auto& mt = r.mean_times;
    const double n = static_cast<double>(scenes.size());
    mt.fe += t.fe / n;
    mt.cn += t.cn / n;
    mt.vae += t.vae / n;
    mt.sd += t.sd / n;
    mt.ss += t.ss / n;
    mt.fm += t.fm / n;
    r.predictions.push_back(std::move(results[i].prediction));
    r.completions.push_back(std::move(results[i].completion));
  }
  return r;
}

using Predictor = std::function<VoxelGrid(std::size_t index, const SyntheticScene&)>;

inline EvalReport evaluate_predictor(const std::vector<SyntheticScene>& scenes, std::size_t classes,
                                     const Predictor& predict) {
  EvalReport r = empty_report(classes);
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    VoxelGrid p = predict(i, scenes[i]);
    add_to_report(r, p, scenes[i].grid);
    r.predictions.push_back(std::move(p));
  }
  r.completion_semantic = r.semantic;
  r.completion_occupancy = r.occupancy;
  return r;
}

/// Most frequent label over a scene set (ties to the lower label).
inline Label majority_class(const std::vector<SyntheticScene>& scenes, std::size_t classes) {
  std::vector<std::uint64_t> counts(classes, 0);
  for (const auto& s : scenes)
    for (Label l : s.grid.labels) ++counts[l];
  return static_cast<Label>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

inline Predictor constant_predictor(Label label) {
  return [label](std::size_t, const SyntheticScene& s) {
    VoxelGrid g(s.grid.extents, s.grid.classes, s.grid.voxel_size);
    std::fill(g.labels.begin(), g.labels.end(), label);
    return g;
  };
}

inline Predictor uniform_random_predictor(std::uint64_t seed) {
  return [seed](std::size_t i, const SyntheticScene& s) {
    Rng rng(derive_seed(stream_seed(seed, Stream::baseline), i));
    VoxelGrid g(s.grid.extents, s.grid.classes, s.grid.voxel_size);
    for (auto& l : g.labels) l = static_cast<Label>(uniform_index(rng, 0, s.grid.classes - 1));
    return g;
  };
}

inline Predictor oracle_predictor() {
  return [](std::size_t, const SyntheticScene& s) { return s.grid; };
}

/// First-order expectation of the uniform-random predictor's mIoU over the
/// pooled counts: IoU_c ~ n_c / (C n_c + V - n_c).
inline double expected_uniform_miou(const std::vector<SyntheticScene>& scenes, std::size_t classes) {
  std::vector<double> n(classes, 0.0);
  double V = 0;
  for (const auto& s : scenes) {
    for (Label l : s.grid.labels) n[l] += 1;
    V += static_cast<double>(s.grid.labels.size());
  }
  double total = 0;
  std::size_t present = 0;
  const double C = static_cast<double>(classes);
  for (std::size_t c = 1; c < classes; ++c) {
    if (n[c] == 0) continue;
    total += n[c] / (C * n[c] + V - n[c]);
    ++present;
  }
  return present ? total / static_cast<double>(present) : 0.0;
}

// ---------------------------------------------------------------------------
// Reports.

inline std::string fmt(double v, int precision = 6) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(precision) << v;
  return o.str();
}

inline std::string iou_cell(const ConfusionCounts& c, std::size_t cls) {
  if (!c.present(cls)) return "n/a";
  return fmt(*c.iou(cls));
}

/// metrics.csv, per_class.csv and timing.csv.
inline void write_eval_csv(const fs::path& dir, const EvalReport& r) {
  fs::create_directories(dir);
  std::ostringstream m;
  m << "metric,value\n";
  m << "iou," << fmt(r.iou()) << "\n";
  m << "miou," << fmt(r.miou()) << "\n";
  m << "completion_stage_iou," << fmt(r.completion_stage_iou()) << "\n";
  m << "scenes," << r.predictions.size() << "\n";
  detail::write_file((dir / "metrics.csv").string(), m.str());
  std::ostringstream p;
  p << "class,name,iou,tp,fp,fn\n";
  for (std::size_t c = 0; c < r.classes; ++c) {
    p << c << "," << class_name(c) << "," << iou_cell(r.semantic, c) << "," << r.semantic.tp[c] << ","
      << r.semantic.fp[c] << "," << r.semantic.fn[c] << "\n";
  }
  detail::write_file((dir / "per_class.csv").string(), p.str());
  std::ostringstream t;
  t << "stage,seconds\n";
  const auto& s = r.mean_times;
  for (auto [name, v] : {std::pair{"FE", s.fe}, {"CN", s.cn}, {"VAE", s.vae}, {"SD", s.sd}, {"SS", s.ss}, {"FM", s.fm}}) {
    t << name << "," << fmt(v) << "\n";
  }
  detail::write_file((dir / "timing.csv").string(), t.str());
}

inline std::string format_eval_table(const EvalReport& r) {
  std::ostringstream o;
  o << std::left << std::setw(10) << "class" << std::right << std::setw(10) << "IoU" << "\n";
  for (std::size_t c = 1; c < r.classes; ++c) {
    o << std::left << std::setw(10) << class_name(c) << std::right << std::setw(10) << iou_cell(r.semantic, c) << "\n";
  }
  o << std::left << std::setw(10) << "IoU" << std::right << std::setw(10) << fmt(r.iou()) << "\n";
  o << std::left << std::setw(10) << "mIoU" << std::right << std::setw(10) << fmt(r.miou()) << "\n";
  return o.str();
}

inline std::vector<std::pair<std::string, double>> stage_rows(const StageTimes& s) {
  return {{"FE", s.fe}, {"CN", s.cn}, {"VAE", s.vae}, {"SD", s.sd}, {"SS", s.ss}, {"FM", s.fm}};
}

inline std::string format_stage_table(const StageTimes& s) {
  std::ostringstream o;
  o << std::left << std::setw(8) << "stage" << std::right << std::setw(12) << "seconds" << "\n";
  for (const auto& [name, v] : stage_rows(s)) o << std::left << std::setw(8) << name << std::right << std::setw(12) << fmt(v) << "\n";
  return o.str();
}

inline void write_voxel_outputs(const fs::path& dir, const std::string& stem, const std::vector<VoxelGrid>& grids) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < grids.size(); ++i) {
    std::ostringstream name;
    name << stem << "_" << std::setw(5) << std::setfill('0') << i << ".voxl";
    save_voxel_grid((dir / name.str()).string(), grids[i]);
  }
}

// ---------------------------------------------------------------------------
// Ablation.

struct AblationVariant {
  std::string name;
  bool use_mscb, use_sb, use_skimba;
};

inline const std::vector<AblationVariant>& ablation_variants() {
  static const std::vector<AblationVariant> v{{"w/o MSCB", false, true, true},
                                              {"w/o SB", true, false, true},
                                              {"w/o Skimba", true, true, false},
                                              {"Full Model", true, true, true}};
  return v;
}

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  double completion_iou = 0, seg_iou = 0, seg_miou = 0;
};

/// Trains and evaluates every variant for every seed. Within one seed all
/// variants share the VAE and every random stream.
inline std::vector<AblationRow> run_ablation(const RunConfig& cfg, const Dataset& data,
                                             const std::vector<std::uint64_t>& seeds, const Logger& log = {}) {
  std::vector<AblationRow> rows;
  for (std::uint64_t seed : seeds) {
    auto vae = std::make_shared<VaeModel>(cfg.net, stream_seed(seed, Stream::vae_init));
    train_vae_stage(*vae, cfg, data.train, seed, log);
    for (const auto& v : ablation_variants()) {
      RunConfig c = cfg;
      c.net.use_mscb = v.use_mscb;
      c.net.use_sb = v.use_sb;
      c.net.use_skimba = v.use_skimba;
      if (log) log("ablation seed " + std::to_string(seed) + " variant " + v.name);
      const TrainedModels m = train_pipeline(c, data, seed, vae, log);
      const EvalReport r = evaluate(m, c, data.test, seed);
      rows.push_back({v.name, seed, r.completion_stage_iou(), r.iou(), r.miou()});
      if (log) log("  completion IoU " + fmt(r.completion_stage_iou(), 4) + " IoU " + fmt(r.iou(), 4) + " mIoU " + fmt(r.miou(), 4));
    }
  }
  return rows;
}

struct AblationSummary {
  std::string variant;
  double completion_iou = 0, seg_iou = 0, seg_miou = 0;
  std::size_t runs = 0;
};

inline std::vector<AblationSummary> summarize_ablation(const std::vector<AblationRow>& rows) {
  std::vector<AblationSummary> out;
  for (const auto& v : ablation_variants()) {
    AblationSummary s{v.name};
    for (const auto& r : rows) {
      if (r.variant != v.name) continue;
      s.completion_iou += r.completion_iou;
      s.seg_iou += r.seg_iou;
      s.seg_miou += r.seg_miou;
      ++s.runs;
    }
    if (s.runs) {
      const double n = static_cast<double>(s.runs);
      s.completion_iou /= n;
      s.seg_iou /= n;
      s.seg_miou /= n;
      out.push_back(s);
    }
  }
  return out;
}

inline std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream o;
  o << std::left << std::setw(14) << "Method" << std::right << std::setw(16) << "Completion IoU" << std::setw(12)
    << "Seg IoU" << std::setw(10) << "mIoU" << "\n";
  for (const auto& s : summarize_ablation(rows)) {
    o << std::left << std::setw(14) << s.variant << std::right << std::setw(16) << fmt(s.completion_iou, 4)
      << std::setw(12) << fmt(s.seg_iou, 4) << std::setw(10) << fmt(s.seg_miou, 4) << "\n";
  }
  return o.str();
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream o;
  o << "variant,seed,completion_iou,seg_iou,seg_miou\n";
  for (const auto& r : rows) {
    o << r.variant << "," << r.seed << "," << fmt(r.completion_iou) << "," << fmt(r.seg_iou) << "," << fmt(r.seg_miou)
      << "\n";
  }
  return o.str();
}

// ---------------------------------------------------------------------------
// Benchmarks.

/// Mean per-stage times of the full pipeline over `scenes`.
inline StageTimes bench_pipeline(const TrainedModels& m, const RunConfig& cfg, const std::vector<SyntheticScene>& scenes,
                                 std::uint64_t seed) {
  Pipeline<float> pipeline(*m.vae->net, *m.completion->net, *m.seg->net, cfg.schedule(), m.completion->latent_scale);
  StageTimes mean;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    Rng rng(derive_seed(stream_seed(seed, Stream::sampling), i));
    const auto t = pipeline(scenes[i].image, scenes[i].camera, rng).times;
    const double n = static_cast<double>(scenes.size());
    mean.fe += t.fe / n;
    mean.cn += t.cn / n;
    mean.vae += t.vae / n;
    mean.sd += t.sd / n;
    mean.ss += t.ss / n;
    mean.fm += t.fm / n;
  }
  return mean;
}

struct ScanBenchRow {
  std::size_t tokens, state, channels, dilation;
  double seconds, tokens_per_second;
};

inline std::vector<ScanBenchRow> bench_scan(const std::vector<std::size_t>& lengths = {512, 4096},
                                            const std::vector<std::size_t>& states = {8, 16},
                                            const std::vector<std::size_t>& channels = {16, 32},
                                            std::uint64_t seed = 0) {
  std::vector<ScanBenchRow> rows;
  NoGradGuard no_grad;
  for (auto S : lengths)
    for (auto N : states)
      for (auto C : channels) {
        ParamStore<float> store;
        Rng rng(seed);
        Scope<float> scope(store, rng);
        const auto params = ScanParams<float>::create(scope, C, C, N);
        const Tensor<float> x = gaussian_like<float>({S, C}, rng);
        for (auto d : kSkimbaDilations) {
          const auto t0 = std::chrono::steady_clock::now();
          std::size_t reps = 0;
          double elapsed = 0;
          do {
            (void)dilated_scan(params, x, d);
            ++reps;
            elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
          } while (elapsed < 0.05 && reps < 1000);
          const double per = elapsed / static_cast<double>(reps);
          rows.push_back({S, N, C, d, per, static_cast<double>(S) / per});
        }
      }
  return rows;
}

inline std::string format_scan_table(const std::vector<ScanBenchRow>& rows) {
  std::ostringstream o;
  o << std::right << std::setw(8) << "S" << std::setw(6) << "N" << std::setw(6) << "C" << std::setw(6) << "d"
    << std::setw(14) << "ms/scan" << std::setw(16) << "tokens/s" << "\n";
  for (const auto& r : rows) {
    o << std::setw(8) << r.tokens << std::setw(6) << r.state << std::setw(6) << r.channels << std::setw(6)
      << r.dilation << std::setw(14) << fmt(r.seconds * 1e3, 3) << std::setw(16) << fmt(r.tokens_per_second, 0)
      << "\n";
  }
  return o.str();
}

inline std::string scan_csv(const std::vector<ScanBenchRow>& rows) {
  std::ostringstream o;
  o << "tokens,state,channels,dilation,seconds,tokens_per_second\n";
  for (const auto& r : rows) {
    o << r.tokens << "," << r.state << "," << r.channels << "," << r.dilation << "," << fmt(r.seconds, 9) << ","
      << fmt(r.tokens_per_second, 1) << "\n";
  }
  return o.str();
}

/// Multiply counts per output voxel of the stacked 3x3x3 MSCB versus the full
/// kernel it emulates, in units of C^2 and for a concrete width.
inline std::string format_block_costs(std::size_t channels) {
  std::ostringstream o;
  o << std::left << std::setw(12) << "effective" << std::right << std::setw(12) << "stacked" << std::setw(12)
    << "full" << std::setw(14) << "stacked@C" << std::setw(14) << "full@C" << "\n";
  for (std::size_t k : {5, 7}) {
    const auto unit = cost_report(k, 1);
    const auto c = cost_report(k, channels);
    o << std::left << std::setw(12) << (std::to_string(k) + "^3") << std::right << std::setw(12)
      << (std::to_string(unit.stacked) + "C^2") << std::setw(12) << (std::to_string(unit.full) + "C^2")
      << std::setw(14) << c.stacked << std::setw(14) << c.full << "\n";
  }
  return o.str();
}

}  // namespace skimba
