#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "qsynth/container.hpp"
#include "qsynth/losses.hpp"
#include "qsynth/model.hpp"
#include "qsynth/rng.hpp"

namespace qsynth {

struct TrainConfig {
  int batch_size = 16;
  int epochs = 50;
  double lr_g = 1e-4;
  double lr_d = 5e-5;
  double lr_decay = 0.95;  // per epoch
  int d_every = 2;         // one discriminator update per this many generator updates
  LossWeights weights;
  std::uint64_t seed = 0;

  void validate() const;
};

double lr_at_epoch(double initial, int epoch, double decay);

struct TrainSample {
  const float* structurals;  // 3 * H * W
  QSpacePoint q;
  const float* target;  // H * W
  std::size_t scheme_index;
};

// Uniform iid draws over the scheme points of a dataset.
std::vector<TrainSample> sample_batch(const DwiDataset& data, int n, Rng& rng);

// Evenly spread non-b0 scheme indices to exclude from training.
std::vector<int> holdout_indices(const SamplingScheme& scheme, int count);

struct StepRecord {
  long step = 0;
  float total = 0, adv_g = 0, adv_d = 0, rec = 0, ac = 0;
  float lr_g = 0, lr_d = 0;
};

// Adam with beta1 = 0.5, beta2 = 0.999, eps = 1e-8, bias correction.
class Adam {
 public:
  void attach(const ParamList<float>& params);
  void step(const ParamList<float>& params, float lr);

  long t() const { return t_; }
  std::vector<float>& m() { return m_; }
  std::vector<float>& v() { return v_; }
  void restore(long t, std::vector<float> m, std::vector<float> v);

 private:
  long t_ = 0;
  std::vector<float> m_, v_;
};

struct Checkpoint {
  GeneratorConfig gen_cfg;
  DiscriminatorConfig disc_cfg;
  TrainConfig train_cfg;
  double b_max = 0.0;
  int epoch = 0;  // epochs completed
  long step = 0;
  std::uint64_t rng_state = 0;
  std::vector<int> train_indices;
  std::vector<float> gen_weights, disc_weights;
  long adam_g_t = 0, adam_d_t = 0;
  std::vector<float> adam_g_m, adam_g_v, adam_d_m, adam_d_v;
};

void save_checkpoint(const std::string& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& dir);

// Alternating adversarial training over one dataset. Single-writer: the
// trainer owns all mutable state; kernels parallelize internally.
class Trainer {
 public:
  Trainer(const GeneratorConfig& gcfg, const DiscriminatorConfig& dcfg,
          const TrainConfig& tcfg);
  explicit Trainer(const Checkpoint& ckpt);

  // Runs the remaining epochs. One epoch is one shuffled pass over the
  // training scheme points. Writes loss.csv and per-epoch checkpoints under
  // out_dir when it is non-empty. on_step, when set, sees every record.
  void run(const DwiDataset& data, const std::vector<int>& train_indices,
           const std::string& out_dir,
           const std::function<void(const StepRecord&)>& on_step = {});

  // One optimizer step on an explicit batch; exposed for targeted tests.
  StepRecord train_step(const DwiDataset& data, const std::vector<int>& batch_indices,
                        long step_index, int epoch);

  Checkpoint to_checkpoint(const DwiDataset& data, const std::vector<int>& train_indices);

  Generator<float>& generator() { return *gen_; }
  Discriminator<float>& discriminator() { return *disc_; }
  const TrainConfig& config() const { return tcfg_; }
  int epochs_done() const { return epoch_done_; }
  long steps_done() const { return step_index_; }
  Rng& rng() { return rng_; }

 private:
  GeneratorConfig gcfg_;
  DiscriminatorConfig dcfg_;
  TrainConfig tcfg_;
  std::unique_ptr<Generator<float>> gen_;
  std::unique_ptr<Discriminator<float>> disc_;
  FeatureExtractor<float> extractor_;
  Adam adam_g_, adam_d_;
  Rng rng_{0};
  int epoch_done_ = 0;
  long step_index_ = 0;
};

// Batched synthesis: one slice per scheme point, conditioned with
// b_norm = b / b_max_train. Throws when a point exceeds the trained range.
std::vector<float> synthesize(Generator<float>& gen, const DwiDataset& data,
                              const SamplingScheme& scheme, double b_max_train,
                              int batch_size = 16);

Tensor<float> q_tensor(const std::vector<QSpacePoint>& points);

}  // namespace qsynth
