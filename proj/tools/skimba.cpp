// skimba command-line driver.

#include <CLI11.hpp>
#include <iostream>

#include "skimba/harness.hpp"

namespace {

using namespace skimba;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "skimba_out";
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "key=value config file");
  app->add_option("--seed", c.seed, "root seed (overrides the config)");
  app->add_option("--out", c.out, "output directory");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

void log_line(const std::string& s) { std::cerr << s << "\n"; }

Dataset dataset_for(const RunConfig& cfg, const std::string& data_dir) {
  if (!data_dir.empty()) return load_dataset(data_dir, cfg);
  return generate_dataset(cfg, cfg.seed);
}

void write_curve(const fs::path& path, const TrainResult& r, bool append) {
  std::ostringstream o;
  if (!append) o << "step,loss,lr\n";
  for (std::size_t i = 0; i < r.losses.size(); ++i) {
    o << (r.first_step + i + 1) << "," << fmt(r.losses[i], 8) << "," << fmt(r.lrs[i], 10) << "\n";
  }
  std::ofstream f(path, append ? std::ios::app : std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << o.str();
}

/// Shared driver for the three training subcommands.
template <typename LossFn>
void run_stage(const std::string& kind, ParamStore<float>& store, const RunConfig& cfg, const StageTraining& st,
               std::size_t scenes, std::uint64_t seed, const fs::path& out, bool resume, LossFn&& loss,
               std::vector<CheckpointEntry> extra = {}) {
  StageTrainer trainer(store, cfg, st, scenes, seed);
  const fs::path ckpt = out / (kind + ".skba");
  bool resumed = false;
  if (resume && fs::exists(ckpt)) {
    const CheckpointMeta meta = load_meta(ckpt);
    if (meta.kind != kind) throw FormatError(ckpt.string() + " is a " + meta.kind + " checkpoint");
    trainer.resume(load_checkpoint(ckpt.string()), meta.step);
    resumed = true;
    log_line(kind + ": resuming at step " + std::to_string(meta.step));
  }
  TrainOptions opt;
  opt.log = [&](const std::string& s) { log_line(kind + " " + s); };
  const TrainResult r = trainer.run(loss, opt);
  auto entries = trainer.state_entries();
  for (auto& e : extra) entries.push_back(std::move(e));
  save_stage(ckpt, entries, {kind, trainer.step(), trainer.total_steps(), cfg.seed, format_config(cfg)});
  write_curve(out / (kind + "_loss.csv"), r, resumed);
  std::cout << kind << ": " << trainer.step() << " steps, final loss "
            << (r.losses.empty() ? std::string("n/a") : fmt(r.losses.back(), 6)) << ", checkpoint " << ckpt.string()
            << "\n";
}

TrainedModels load_models(const RunConfig& cfg, const fs::path& dir) {
  TrainedModels m = init_models(cfg.net, cfg.seed);
  load_vae(*m.vae, dir / "vae.skba");
  load_completion(*m.completion, dir / "diffusion.skba");
  load_seg(*m.seg, dir / "seg.skba");
  return m;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  for (auto v : detail::parse_list("--seeds", s)) out.push_back(v);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"skimba: latent-diffusion semantic scene completion on synthetic voxel scenes"};
  app.require_subcommand(1);

  Common common;
  std::string data_dir, ckpt_dir, vae_path, split = "test", seeds = "0,1,2";
  bool resume = false, blocks = false;
  std::size_t steps = kDefaultDiffusionSteps, scene = 0, bench_scenes = 4, cost_channels = 16;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  auto* tvae = app.add_subcommand("train-vae", "train the voxel VAE");
  auto* tdiff = app.add_subcommand("train-diffusion", "train feature extractor, condition networks and denoiser");
  auto* tseg = app.add_subcommand("train-seg", "train the segmentation network");
  auto* eval = app.add_subcommand("eval", "run the full pipeline on a split and report IoU / mIoU");
  auto* samp = app.add_subcommand("sample", "sample one scene completion");
  auto* bench = app.add_subcommand("bench", "per-stage timings, scan throughput and block costs");
  auto* abl = app.add_subcommand("ablate", "train and evaluate the ablation variants");
  for (auto* sc : {gen, tvae, tdiff, tseg, eval, samp, bench, abl}) add_common(sc, common);
  for (auto* sc : {tvae, tdiff, tseg, eval, samp, abl}) sc->add_option("--data", data_dir, "dataset directory from gen-data");
  for (auto* sc : {tvae, tdiff, tseg}) sc->add_flag("--resume", resume, "continue from the checkpoint in --out");
  for (auto* sc : {tdiff, tseg}) sc->add_option("--vae", vae_path, "VAE checkpoint (default <out>/vae.skba)");
  for (auto* sc : {eval, samp, bench}) sc->add_option("--ckpt", ckpt_dir, "checkpoint directory (default --out)");
  eval->add_option("--split", split, "train, val or test");
  samp->add_option("--steps", steps, "denoising steps")->check(CLI::PositiveNumber);
  samp->add_option("--scene", scene, "scene index in --split");
  samp->add_option("--split", split, "train, val or test");
  bench->add_flag("--blocks", blocks, "print the MSCB cost pairs only");
  bench->add_option("--scenes", bench_scenes, "scenes to time")->check(CLI::PositiveNumber);
  bench->add_option("--channels", cost_channels, "width for the concrete cost columns")->check(CLI::PositiveNumber);
  abl->add_option("--seeds", seeds, "comma-separated seeds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    const RunConfig cfg = resolve(common);
    const fs::path out = common.out;
    const fs::path ckpt = ckpt_dir.empty() ? out : fs::path(ckpt_dir);
    worker_count();  // validates SKIMBA_THREADS up front

    if (*gen) {
      const Dataset d = generate_dataset(cfg, cfg.seed);
      save_dataset(d, out);
      detail::write_file((out / "config.cfg").string(), format_config(cfg));
      std::cout << "wrote " << d.train.size() << " train, " << d.val.size() << " val, " << d.test.size()
                << " test scenes to " << out.string() << "\n";
    } else if (*tvae) {
      const Dataset d = dataset_for(cfg, data_dir);
      fs::create_directories(out);
      VaeModel m(cfg.net, stream_seed(cfg.seed, Stream::vae_init));
      run_stage("vae", m.store, cfg, cfg.vae, d.train.size(), stream_seed(cfg.seed, Stream::vae_train), out, resume,
                vae_loss(m, cfg, d.train));
      const auto [iou, miou] = vae_reconstruction_metrics(m, d.val.empty() ? d.train : d.val);
      std::cout << "vae reconstruction IoU " << fmt(iou, 4) << " mIoU " << fmt(miou, 4) << "\n";
    } else if (*tdiff || *tseg) {
      const Dataset d = dataset_for(cfg, data_dir);
      fs::create_directories(out);
      VaeModel vae(cfg.net, stream_seed(cfg.seed, Stream::vae_init));
      load_vae(vae, vae_path.empty() ? out / "vae.skba" : fs::path(vae_path));
      const auto latents = encode_latents(vae, d.train);
      const float scale = latent_scale_of(latents);
      if (*tdiff) {
        CompletionModel m(cfg.net, stream_seed(cfg.seed, Stream::completion_init));
        m.latent_scale = scale;
        const NoiseSchedule schedule = cfg.schedule();
        run_stage("diffusion", m.store, cfg, cfg.diffusion, d.train.size(),
                  stream_seed(cfg.seed, Stream::diffusion_train), out, resume,
                  diffusion_loss(m, schedule, d.train, latents), {{kLatentScaleEntry, {1}, {scale}}});
      } else {
        SegModel m(cfg.net, stream_seed(cfg.seed, Stream::seg_init));
        run_stage("seg", m.store, cfg, cfg.seg, d.train.size(), stream_seed(cfg.seed, Stream::seg_train), out, resume,
                  seg_loss(m, vae, cfg, d.train, latents, scale));
      }
    } else if (*eval) {
      const Dataset d = dataset_for(cfg, data_dir);
      const auto& scenes = d.split(parse_split(split));
      if (scenes.empty()) throw ConfigError("split '" + split + "' has no scenes");
      const TrainedModels m = load_models(cfg, ckpt);
      const EvalReport r = evaluate(m, cfg, scenes, cfg.seed);
      write_eval_csv(out, r);
      write_voxel_outputs(out / "predictions", "pred", r.predictions);
      std::cout << format_eval_table(r) << "\n" << format_stage_table(r.mean_times);
    } else if (*samp) {
      const Dataset d = dataset_for(cfg, data_dir);
      const auto& scenes = d.split(parse_split(split));
      if (scene >= scenes.size()) throw ConfigError("scene index " + std::to_string(scene) + " out of range");
      const TrainedModels m = load_models(cfg, ckpt);
      const NoiseSchedule schedule = NoiseSchedule::linear(steps, cfg.beta_start, cfg.beta_end);
      Pipeline<float> pipeline(*m.vae->net, *m.completion->net, *m.seg->net, schedule, m.completion->latent_scale);
      Rng rng(derive_seed(stream_seed(cfg.seed, Stream::sampling), scene));
      const auto r = pipeline(scenes[scene].image, scenes[scene].camera, rng);
      fs::create_directories(out);
      save_checkpoint((out / "latent.skba").string(),
                      {{"latent", r.latent.shape(), std::vector<float>(r.latent.data().begin(), r.latent.data().end())}});
      save_voxel_grid((out / "completion.voxl").string(), r.completion);
      save_voxel_grid((out / "prediction.voxl").string(), r.prediction);
      std::cout << "sampled scene " << scene << " with " << steps << " steps: completion IoU "
                << fmt(completion_iou(r.completion.labels, scenes[scene].grid.labels), 4) << ", mIoU "
                << fmt(semantic_miou(r.prediction.labels, scenes[scene].grid.labels, cfg.net.classes), 4) << "\n";
    } else if (*bench) {
      std::cout << format_block_costs(cost_channels);
      if (!blocks) {
        TrainedModels m = init_models(cfg.net, cfg.seed);
        if (!ckpt_dir.empty()) m = load_models(cfg, ckpt);
        std::vector<SyntheticScene> scenes = generate_split(cfg, cfg.seed, Split::test, bench_scenes);
        const StageTimes t = bench_pipeline(m, cfg, scenes, cfg.seed);
        std::cout << "\n" << format_stage_table(t);
        const auto rows = bench_scan();
        std::cout << "\n" << format_scan_table(rows);
        fs::create_directories(out);
        std::ostringstream st;
        st << "stage,seconds\n";
        for (const auto& [name, v] : stage_rows(t)) st << name << "," << fmt(v) << "\n";
        detail::write_file((out / "bench_stages.csv").string(), st.str());
        detail::write_file((out / "bench_scan.csv").string(), scan_csv(rows));
      }
    } else if (*abl) {
      const Dataset d = dataset_for(cfg, data_dir);
      const auto rows = run_ablation(cfg, d, parse_seeds(seeds), log_line);
      fs::create_directories(out);
      detail::write_file((out / "ablation.csv").string(), ablation_csv(rows));
      std::cout << format_ablation_table(rows);
    }
  } catch (const ConfigError& e) {
    std::cerr << "skimba: invalid config: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "skimba: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
