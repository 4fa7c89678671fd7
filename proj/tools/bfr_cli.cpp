#include "bfr/diagnostics.hpp"
#include "bfr/errors.hpp"
#include "bfr/ops.hpp"
#include "bfr/pipeline.hpp"
#include "bfr/trainkit.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace bfr;

namespace {

constexpr int kUsage = 1;
constexpr int kFailure = 2;

bool is_image(const fs::path& p) {
  const auto ext = p.extension().string();
  return ext == ".png" || ext == ".ppm";
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw ValidationError("cannot write " + path.string());
}

struct TrainArgs {
  std::string config, data, out, resume;
  std::int64_t save_every = 500;
};

int run_train(const TrainArgs& a) {
  const RunConfig config = load_config(a.config);
  const Dataset data = load_dataset(a.data);
  std::unique_ptr<TrainState> state = std::make_unique<TrainState>(config);
  if (!a.resume.empty()) {
    load_checkpoint(*state, a.resume);
    std::printf("resumed from %s at step %lld\n", a.resume.c_str(), static_cast<long long>(state->step));
  }
  state->boxes = data.roi_boxes();
  fs::create_directories(a.out);
  write_text(fs::path(a.out) / "config.cfg", format_config(config));
  std::ofstream log(fs::path(a.out) / "train.log", a.resume.empty() ? std::ios::trunc : std::ios::app);
  const fs::path ckpt = fs::path(a.out) / "checkpoint.bfrf";
  const auto start = std::chrono::steady_clock::now();
  train(*state, data, config.steps, [&](const StepReport& r) {
    if (config.log_every > 0 && (r.step % config.log_every == 0 || r.step == config.steps)) {
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      char buf[32];
      std::snprintf(buf, sizeof buf, " time=%.1fs", wall);
      const std::string line = r.summary() + buf;
      std::printf("%s\n", line.c_str());
      std::fflush(stdout);
      log << line << '\n' << std::flush;
    }
    if (a.save_every > 0 && r.step % a.save_every == 0) save_checkpoint(*state, ckpt);
  });
  save_checkpoint(*state, ckpt);
  std::printf("wrote %s\n", ckpt.string().c_str());
  return 0;
}

int run_degrade(const std::string& data_dir, const std::string& out, std::uint64_t seed, const std::string& config) {
  Dataset data = load_dataset(data_dir);
  const DegradationParams params = config.empty() ? DegradationParams{} : load_config(config).degradation;
  synthesize_lq(data, params, seed);
  save_dataset(data, out);
  std::printf("degraded %lld images into %s\n", static_cast<long long>(data.size()), out.c_str());
  return 0;
}

int run_restore(const std::string& ckpt, const std::string& in, const std::string& out) {
  auto state = load_checkpoint(ckpt);
  std::vector<fs::path> inputs;
  if (fs::is_directory(in)) {
    for (const auto& e : fs::directory_iterator(in))
      if (e.is_regular_file() && is_image(e.path())) inputs.push_back(e.path());
    std::sort(inputs.begin(), inputs.end());
  } else {
    inputs.push_back(in);
  }
  fs::create_directories(out);
  for (const auto& path : inputs) {
    const ImageRecord rec = load_image(path);
    if (rec.hq.dim(1) != state->config.generator.img_size) {
      throw ValidationError(path.string() + " is " + std::to_string(rec.hq.dim(1)) + " px, model expects " +
                            std::to_string(state->config.generator.img_size));
    }
    const auto restored = restore(state->generator, reshape(rec.hq, {1, 3, rec.hq.dim(1), rec.hq.dim(2)}));
    const fs::path target = fs::path(out) / (path.stem().string() + path.extension().string());
    save_image(reshape(restored, rec.hq.shape()), target);
    std::printf("%s -> %s\n", path.string().c_str(), target.string().c_str());
  }
  return 0;
}

int run_eval(const std::string& ckpt, const std::string& data_dir, const std::string& report) {
  auto state = load_checkpoint(ckpt);
  const Dataset data = load_dataset(data_dir);
  state->boxes = data.roi_boxes();
  const MetricsReport m = evaluate(*state, data);
  write_text(report, m.to_csv());
  std::printf("psnr %.4f  ssim %.4f  id_cos %.4f  feature_frechet %.6f (%zu images)\n", m.mean_psnr, m.mean_ssim,
              m.mean_id_cos, m.feature_frechet, m.rows.size());
  return 0;
}

int run_gradcheck(const std::string& module, int seeds) {
  int failed = 0;
  for (const auto& r : gradient_suite(module, seeds)) {
    failed += !r.passed();
    std::printf("%-4s %-44s rel_err %.3e (tol %.0e)\n", r.passed() ? "ok" : "FAIL", r.name.c_str(), r.max_rel_error,
                r.tolerance);
  }
  std::printf("%s\n", failed ? "gradcheck failed" : "all gradients within tolerance");
  return failed ? kFailure : 0;
}

int run_selftest() {
  int failed = 0;
  for (const auto& r : selftest()) {
    failed += !r.passed;
    std::printf("%-4s %-42s %s\n", r.passed ? "ok" : "FAIL", r.name.c_str(), r.detail.c_str());
  }
  return failed ? kFailure : 0;
}

int run_synth(const std::string& out, Index count, Index size, std::uint64_t seed) {
  Dataset data = synthetic_faces(count, size, seed);
  data.boxes = RoiBoxes{};
  save_dataset(data, out);
  std::printf("wrote %lld synthetic faces to %s\n", static_cast<long long>(count), out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Blind face restoration: training, restoration and evaluation"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train from a config on a paired dataset");
  train_cmd->add_option("--config", train_args.config, "Config file (key = value)")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--data", train_args.data, "Dataset root with hq/ and lq/")->required();
  train_cmd->add_option("--out", train_args.out, "Output directory")->required();
  train_cmd->add_option("--resume", train_args.resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  train_cmd->add_option("--save-every", train_args.save_every, "Checkpoint interval in steps (0: only at the end)")
      ->check(CLI::NonNegativeNumber);

  std::string deg_data, deg_out, deg_config;
  std::uint64_t deg_seed = 0;
  auto* degrade_cmd = app.add_subcommand("degrade", "Synthesize lq/ images from hq/");
  degrade_cmd->add_option("--data", deg_data, "Dataset root with hq/")->required();
  degrade_cmd->add_option("--out", deg_out, "Output dataset root")->required();
  degrade_cmd->add_option("--seed", deg_seed, "Degradation seed")->required();
  degrade_cmd->add_option("--config", deg_config, "Config supplying degradation ranges")->check(CLI::ExistingFile);

  std::string res_ckpt, res_in, res_out;
  auto* restore_cmd = app.add_subcommand("restore", "Restore an image or a directory of images");
  restore_cmd->add_option("--ckpt", res_ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  restore_cmd->add_option("--in", res_in, "Input image or directory")->required()->check(CLI::ExistingPath);
  restore_cmd->add_option("--out", res_out, "Output directory")->required();

  std::string ev_ckpt, ev_data, ev_report;
  auto* eval_cmd = app.add_subcommand("eval", "Score restorations of a paired dataset");
  eval_cmd->add_option("--ckpt", ev_ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", ev_data, "Dataset root with hq/ and lq/")->required();
  eval_cmd->add_option("--report", ev_report, "CSV report path")->required();

  std::string gc_module;
  int gc_seeds = 5;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient suite (f64)");
  grad_cmd->add_option("--module", gc_module, "Case group")->check(CLI::IsMember(gradient_modules()));
  grad_cmd->add_option("--seeds", gc_seeds, "Random inputs per case")->check(CLI::PositiveNumber);

  auto* self_cmd = app.add_subcommand("selftest", "Quick invariant checks");

  std::string syn_out;
  Index syn_count = 8, syn_size = 64;
  std::uint64_t syn_seed = 0;
  auto* synth_cmd = app.add_subcommand("synth", "Write procedural face images to hq/");
  synth_cmd->add_option("--out", syn_out, "Output dataset root")->required();
  synth_cmd->add_option("--count", syn_count, "Number of images")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--size", syn_size, "Image size (power of two)");
  synth_cmd->add_option("--seed", syn_seed, "Seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n";
    CLI::App* active = &app;
    for (auto* sub : app.get_subcommands()) active = sub;
    std::cerr << active->help();
    return kUsage;
  }

  try {
    if (*train_cmd) return run_train(train_args);
    if (*degrade_cmd) return run_degrade(deg_data, deg_out, deg_seed, deg_config);
    if (*restore_cmd) return run_restore(res_ckpt, res_in, res_out);
    if (*eval_cmd) return run_eval(ev_ckpt, ev_data, ev_report);
    if (*grad_cmd) return run_gradcheck(gc_module, gc_seeds);
    if (*self_cmd) return run_selftest();
    if (*synth_cmd) return run_synth(syn_out, syn_count, syn_size, syn_seed);
  } catch (const NonFiniteError& e) {
    std::cerr << "error: non-finite " << e.component() << " loss: " << e.what() << '\n';
    return kFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kUsage;
}
