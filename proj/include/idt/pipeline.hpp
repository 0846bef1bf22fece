#pragma once

// Training loop, dataset evaluation, decomposition output and relighting.

#include "idt/checkpoint.hpp"
#include "idt/config.hpp"
#include "idt/metrics.hpp"
#include "idt/model.hpp"
#include "idt/objectives.hpp"
#include "idt/scene.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace idt::pipeline {

// ---- training -------------------------------------------------------------

struct TrainingSet {
  scene::DatasetSummary summary;
  std::vector<scene::MultiViewBatch> scenes;
};

TrainingSet load_training_set(const std::filesystem::path& dataset);

// Scene and view indices used at a given step; a pure function of its inputs.
struct StepPlan {
  struct Entry {
    std::size_t scene = 0;
    std::vector<std::size_t> views;  // ascending
  };
  std::vector<Entry> entries;
};
StepPlan plan_step(std::uint64_t seed, std::uint64_t step, std::size_t scene_count,
                   std::size_t available_views, std::size_t batch_scenes, std::size_t views);

struct ObjectiveResult {
  objectives::LossBreakdown breakdown;  // total includes the weighted depth term
  std::optional<double> depth;          // mean |log pred - log gt| over hit pixels
  std::vector<nd::Tensor> grads;        // one per parameter; empty unless requested
};

// Objective on one multi-view batch: loss_total plus depth_weight times the
// auxiliary depth term when the model has a depth head. Throws NumericError
// naming the first non-finite term.
ObjectiveResult training_objective(const model::Model& model, const scene::MultiViewBatch& batch,
                                   const objectives::LossConfig& loss, double depth_weight,
                                   bool with_grad);

struct TrainerState {
  model::Model model;
  model::ParamStore momentum;  // same names and shapes as the parameters
  std::uint64_t step = 0;      // completed updates
};

TrainerState fresh_state(const RunConfig& config);
Checkpoint to_checkpoint(const TrainerState& state);
TrainerState from_checkpoint(const Checkpoint& ckpt);

struct StepReport {
  std::uint64_t step = 0;  // index of the update just taken, from 0
  objectives::LossBreakdown loss;
  std::optional<double> depth;
};

class Trainer {
 public:
  Trainer(RunConfig config, const TrainingSet& data, TrainerState state);

  bool finished() const { return state_.step >= config_.optim.steps; }
  StepReport step();
  const TrainerState& state() const { return state_; }
  double learning_rate(std::uint64_t step) const;

 private:
  RunConfig config_;
  const TrainingSet* data_;
  TrainerState state_;
};

using StepCallback = std::function<void(const StepReport&, const TrainerState&)>;

// Runs until config.optim.steps; `on_step` fires after every update.
TrainerState train(const RunConfig& config, const TrainingSet& data, TrainerState state,
                   const StepCallback& on_step = {});

// ---- evaluation -----------------------------------------------------------

enum class EvalMode { kJoint, kPerView, kOracle };
const char* eval_mode_name(EvalMode mode);

// kOracle ignores `model` and returns the ground-truth layers.
model::IntrinsicSet predict_scene(const model::Model* model, const scene::MultiViewBatch& gt,
                                  EvalMode mode);

struct SceneReport {
  std::string scene;
  metrics::MetricReport report;
};

struct DatasetReport {
  EvalMode mode = EvalMode::kJoint;
  std::vector<SceneReport> scenes;
  metrics::MetricReport mean;  // consistency averaged over scenes where it is defined
};

DatasetReport evaluate_dataset(const model::Model* model, const std::filesystem::path& dataset,
                               EvalMode mode, const metrics::EvalConfig& config);
metrics::MetricReport mean_report(const std::vector<SceneReport>& scenes);

std::string dataset_report_csv(const DatasetReport& report);
std::string dataset_report_json(const DatasetReport& report);

// ---- decomposition and relighting outputs ----------------------------------

std::vector<Image> load_views(const std::vector<std::filesystem::path>& paths);

// view_XX_{albedo,sdiff,sspec,recomposed,residual}.pfm, view_XX_depth.pfm when
// depth is present, and sgm.txt. Returns the written paths.
std::vector<std::filesystem::path> write_decomposition(const model::IntrinsicSet& set,
                                                       const std::vector<Image>& inputs,
                                                       const std::filesystem::path& out_dir);

// Amplitude-weighted mean lobe axis; +z when it vanishes.
sg::Vec3 mean_light_direction(const sg::SGMixture& mixture);
// Mean radiance over a 2048-point Fibonacci sphere.
sg::Vec3 mean_radiance(const sg::SGMixture& mixture);

struct RelightResult {
  std::vector<Image> relit;
  std::vector<Image> s_diff;
  std::vector<Image> s_spec;
  sg::Vec3 diffuse_ratio;
  sg::Vec3 specular_ratio;
};

// Rescales predicted diffuse shading by E_new/E_pred (irradiance at the
// predicted mean light direction) and specular shading by the ratio of mean
// radiances, per channel, then recomposes with the predicted albedo. A channel
// whose predicted value is zero keeps ratio 1.
RelightResult relight(const model::IntrinsicSet& decomposition, const sg::SGMixture& new_light);

}  // namespace idt::pipeline
