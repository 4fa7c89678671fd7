#pragma once

#include "bfr/losses.hpp"
#include "bfr/model.hpp"
#include "bfr/pipeline.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace bfr {

// ---- optimizer ---------------------------------------------------------------

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.0;
  double beta2 = 0.99;
  double eps = 1e-8;
};

template <typename S>
struct AdamMoments {
  Eigen::Array<S, Eigen::Dynamic, 1> m;
  Eigen::Array<S, Eigen::Dynamic, 1> v;
};

/// One bias-corrected Adam step on `param` in place; `step` counts from 1.
template <typename S>
void adam_update(Tensor<S>& param, const Eigen::Array<S, Eigen::Dynamic, 1>& grad, AdamMoments<S>& moments,
                 const AdamHyper& hyper, std::int64_t step);

/// Adam over a fixed list of named parameters.
template <typename S>
class Adam {
 public:
  Adam(std::vector<std::pair<std::string, Parameter<S>*>> params, AdamHyper hyper);

  /// Updates every parameter from its accumulated gradient; parameters
  /// without a gradient count as zero-gradient.
  void step();
  std::int64_t steps() const { return t_; }
  void set_steps(std::int64_t t) { t_ = t; }

  const std::vector<std::pair<std::string, Parameter<S>*>>& params() const { return params_; }
  std::vector<AdamMoments<S>>& moments() { return moments_; }
  const AdamHyper& hyper() const { return hyper_; }

 private:
  std::vector<std::pair<std::string, Parameter<S>*>> params_;
  std::vector<AdamMoments<S>> moments_;
  AdamHyper hyper_;
  std::int64_t t_ = 0;
};

// ---- configuration -----------------------------------------------------------

struct RunConfig {
  GeneratorConfig generator;
  LossWeights weights;
  DegradationParams degradation;
  AugPolicy aug;
  AdamHyper adam;
  Index batch_size = 4;
  std::int64_t steps = 2000;
  std::uint64_t seed = 0;
  std::int64_t log_every = 50;
  Index roi_size = 16;
  bool share_eyes = false;

  // Ablation toggles: perceptual loss, ROI critics, augmentation, CAB.
  bool use_perceptual = true;
  bool use_roi = true;
  bool use_aug = true;
  bool use_cab = true;

  /// Loss weights with toggled-off terms zeroed.
  LossWeights effective_weights() const;
  /// Generator config with the CAB toggle applied.
  GeneratorConfig effective_generator() const;
  /// Throws ConfigError on any invalid field.
  void validate() const;

  /// Rows of the ablation table, 0 (all off) to 4 (all on).
  static RunConfig ablation(int row);
  static constexpr int kAblationRows = 5;
  /// Short label such as "per+roi+da".
  std::string toggle_label() const;
};

/// Flat `key = value` text with '#' comments. Every field is written, doubles
/// with round-trip precision.
std::string format_config(const RunConfig& config);
/// Unknown keys and malformed values raise ConfigError naming the line.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

// ---- training ----------------------------------------------------------------

/// Everything a run needs to continue bit-exactly: networks (with SN state),
/// optimizer moments, step counter, rng and configuration.
class TrainState {
  Rng init_;  // construction-time draws only

 public:
  explicit TrainState(const RunConfig& config);
  TrainState(const TrainState&) = delete;
  TrainState& operator=(const TrainState&) = delete;

  RunConfig config;
  LossWeights weights;  // effective
  Generator<float> generator;
  WaveletDiscriminator<float> discriminator;
  RoiDiscriminators<float> roi;
  LossNets<float> nets;
  Adam<float> g_opt;
  Adam<float> d_opt;
  std::int64_t step = 0;
  Rng rng;
  RoiBoxes boxes;

  /// Named parameters of both critics ("d." and "roi." prefixes).
  std::vector<std::pair<std::string, Parameter<float>*>> critic_parameters();
  std::vector<std::pair<std::string, Parameter<float>*>> generator_parameters();
};

struct StepReport {
  LossReport discriminator;
  LossReport generator;
  std::int64_t step = 0;

  /// "name=value" pairs of both reports.
  std::string summary() const;
};

/// One critic update on (hq, detached G(lq)) then one generator update.
/// A non-finite loss term throws NonFiniteError before the update it feeds.
StepReport train_step(TrainState& state, const Tensor<float>& lq, const Tensor<float>& hq);
/// The two halves of train_step; neither advances the step counter. The
/// critic half advances SN power iteration, the generator half reads the
/// stored estimate and leaves every critic tensor untouched.
LossReport discriminator_step(TrainState& state, const Tensor<float>& lq, const Tensor<float>& hq);
LossReport generator_step(TrainState& state, const Tensor<float>& lq, const Tensor<float>& hq);

/// Indices of the next batch drawn from the state's rng.
std::vector<Index> sample_batch(TrainState& state, Index dataset_size);

/// Runs until state.step == until; `on_step` sees every report.
void train(TrainState& state, const Dataset& data, std::int64_t until,
           const std::function<void(const StepReport&)>& on_step = {});

// ---- checkpoints -------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(TrainState& state);
/// Restores into an existing state; tensors must match its shapes.
void decode_checkpoint(TrainState& state, const std::vector<std::uint8_t>& bytes);
/// Config snapshot stored in a checkpoint.
RunConfig checkpoint_config(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(TrainState& state, const std::filesystem::path& path);
std::unique_ptr<TrainState> load_checkpoint(const std::filesystem::path& path);
void load_checkpoint(TrainState& state, const std::filesystem::path& path);

// ---- evaluation --------------------------------------------------------------

struct MetricsRow {
  std::string id;
  double psnr = 0, ssim = 0, id_cos = 0;
};

struct MetricsReport {
  std::vector<MetricsRow> rows;
  double mean_psnr = 0, mean_ssim = 0, mean_id_cos = 0;
  double feature_frechet = 0;

  /// id,psnr,ssim,id_cos rows followed by a "mean" row and a
  /// "feature_frechet" row.
  std::string to_csv() const;
};

/// Scores outputs [n,3,s,s] against targets.
MetricsReport score(const Tensor<float>& outputs, const Tensor<float>& targets, const std::vector<std::string>& ids,
                    LossNets<float>& nets);
/// Restores every LQ image of `data` and scores it against HQ.
MetricsReport evaluate(TrainState& state, const Dataset& data);
/// Generator output for lq [n,3,s,s], in chunks, without gradient.
Tensor<float> restore(Generator<float>& generator, const Tensor<float>& lq, Index chunk = 8);

}  // namespace bfr
