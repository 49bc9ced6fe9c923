#include "qsynth/training.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "qsynth/binio.hpp"

namespace qsynth {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kCkptVersion = "qsynth-ckpt-1";
constexpr double kAdamBeta1 = 0.5;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

json gen_cfg_json(const GeneratorConfig& c) {
  return json{{"height", c.height},
              {"width", c.width},
              {"base_channels", c.base_channels},
              {"n_downsample", c.n_downsample},
              {"n_res_blocks", c.n_res_blocks},
              {"q_embed_dim", c.q_embed_dim},
              {"attention_reduction", c.attention_reduction},
              {"seed", c.seed}};
}

GeneratorConfig gen_cfg_from_json(const json& j) {
  GeneratorConfig c;
  c.height = j.at("height").get<int>();
  c.width = j.at("width").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  c.n_downsample = j.at("n_downsample").get<int>();
  c.n_res_blocks = j.at("n_res_blocks").get<int>();
  c.q_embed_dim = j.at("q_embed_dim").get<int>();
  c.attention_reduction = j.at("attention_reduction").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

json disc_cfg_json(const DiscriminatorConfig& c) {
  return json{{"height", c.height},
              {"width", c.width},
              {"base_channels", c.base_channels},
              {"q_embed_dim", c.q_embed_dim},
              {"seed", c.seed}};
}

DiscriminatorConfig disc_cfg_from_json(const json& j) {
  DiscriminatorConfig c;
  c.height = j.at("height").get<int>();
  c.width = j.at("width").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  c.q_embed_dim = j.at("q_embed_dim").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

json train_cfg_json(const TrainConfig& c) {
  return json{{"batch_size", c.batch_size}, {"epochs", c.epochs},
              {"lr_g", c.lr_g},             {"lr_d", c.lr_d},
              {"lr_decay", c.lr_decay},     {"d_every", c.d_every},
              {"lambda_rec", c.weights.lambda_rec},
              {"lambda_ac", c.weights.lambda_ac},
              {"seed", c.seed}};
}

TrainConfig train_cfg_from_json(const json& j) {
  TrainConfig c;
  c.batch_size = j.at("batch_size").get<int>();
  c.epochs = j.at("epochs").get<int>();
  c.lr_g = j.at("lr_g").get<double>();
  c.lr_d = j.at("lr_d").get<double>();
  c.lr_decay = j.at("lr_decay").get<double>();
  c.d_every = j.at("d_every").get<int>();
  c.weights.lambda_rec = j.at("lambda_rec").get<double>();
  c.weights.lambda_ac = j.at("lambda_ac").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

std::vector<float> concat(const std::vector<float>& a, const std::vector<float>& b) {
  std::vector<float> out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size < 1) throw validation_error("TrainConfig: batch_size must be positive");
  if (epochs < 1) throw validation_error("TrainConfig: epochs must be positive");
  // zero is allowed so a frozen generator or discriminator can be expressed
  if (!(lr_g >= 0) || !(lr_d >= 0))
    throw validation_error("TrainConfig: learning rates must be nonnegative");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0))
    throw validation_error("TrainConfig: lr_decay must lie in (0, 1]");
  if (d_every < 1) throw validation_error("TrainConfig: d_every must be >= 1");
  if (weights.lambda_rec < 0 || weights.lambda_ac < 0)
    throw validation_error("TrainConfig: loss weights must be nonnegative");
}

double lr_at_epoch(double initial, int epoch, double decay) {
  if (!(decay > 0.0 && decay <= 1.0))
    throw validation_error("lr_at_epoch: decay must lie in (0, 1]");
  if (epoch < 0) throw validation_error("lr_at_epoch: epoch must be nonnegative");
  return initial * std::pow(decay, epoch);
}

std::vector<TrainSample> sample_batch(const DwiDataset& data, int n, Rng& rng) {
  if (n < 1) throw validation_error("sample_batch: batch size must be positive");
  if (data.scheme.size() == 0) throw validation_error("sample_batch: empty dataset");
  std::vector<TrainSample> batch;
  batch.resize(std::size_t(n));
  for (int i = 0; i < n; ++i) {
    const std::size_t idx = std::size_t(rng.next_below(data.scheme.size()));
    batch[std::size_t(i)] = {data.structurals.data(), data.scheme.points[idx],
                             data.dwi(idx), idx};
  }
  return batch;
}

std::vector<int> holdout_indices(const SamplingScheme& scheme, int count) {
  if (count < 0) throw validation_error("holdout_indices: count must be nonnegative");
  std::vector<int> nonb0;
  for (std::size_t i = 0; i < scheme.size(); ++i)
    if (scheme.points[i].b > 0.0) nonb0.push_back(int(i));
  if (count > int(nonb0.size()))
    throw validation_error("holdout_indices: not enough non-b0 points");
  std::vector<int> out;
  for (int j = 0; j < count; ++j)
    out.push_back(nonb0[std::size_t(j) * nonb0.size() / std::size_t(count)]);
  return out;
}

void Adam::attach(const ParamList<float>& params) {
  const std::size_t n = param_count(params);
  m_.assign(n, 0.0f);
  v_.assign(n, 0.0f);
  t_ = 0;
}

void Adam::step(const ParamList<float>& params, float lr) {
  ++t_;
  const float b1 = float(kAdamBeta1), b2 = float(kAdamBeta2);
  const float corr1 = 1.0f - std::pow(b1, float(t_));
  const float corr2 = 1.0f - std::pow(b2, float(t_));
  std::size_t off = 0;
  for (const auto& p : params) {
    float* val = p.value->ptr();
    const float* g = p.grad->ptr();
    float* m = m_.data() + off;
    float* v = v_.data() + off;
    const std::size_t n = p.value->numel();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < std::int64_t(n); ++i) {
      const float gi = g[i];
      m[i] = b1 * m[i] + (1.0f - b1) * gi;
      v[i] = b2 * v[i] + (1.0f - b2) * gi * gi;
      const float mhat = m[i] / corr1;
      const float vhat = v[i] / corr2;
      val[i] -= lr * mhat / (std::sqrt(vhat) + float(kAdamEps));
    }
    off += n;
  }
}

void Adam::restore(long t, std::vector<float> m, std::vector<float> v) {
  if (m.size() != m_.size() || v.size() != v_.size())
    throw format_error("Adam::restore: moment size mismatch");
  t_ = t;
  m_ = std::move(m);
  v_ = std::move(v);
}

Trainer::Trainer(const GeneratorConfig& gcfg, const DiscriminatorConfig& dcfg,
                 const TrainConfig& tcfg)
    : gcfg_(gcfg), dcfg_(dcfg), tcfg_(tcfg), rng_(tcfg.seed) {
  tcfg_.validate();
  gen_ = std::make_unique<Generator<float>>(gcfg_);
  disc_ = std::make_unique<Discriminator<float>>(dcfg_);
  adam_g_.attach(gen_->params());
  adam_d_.attach(disc_->params());
}

Trainer::Trainer(const Checkpoint& ckpt)
    : Trainer(ckpt.gen_cfg, ckpt.disc_cfg, ckpt.train_cfg) {
  unflatten_params(gen_->params(), ckpt.gen_weights);
  unflatten_params(disc_->params(), ckpt.disc_weights);
  adam_g_.restore(ckpt.adam_g_t, ckpt.adam_g_m, ckpt.adam_g_v);
  adam_d_.restore(ckpt.adam_d_t, ckpt.adam_d_m, ckpt.adam_d_v);
  rng_.set_state(ckpt.rng_state);
  epoch_done_ = ckpt.epoch;
  step_index_ = ckpt.step;
}

Tensor<float> q_tensor(const std::vector<QSpacePoint>& points) {
  Tensor<float> q({int(points.size()), 4});
  for (std::size_t i = 0; i < points.size(); ++i) {
    q.at2(int(i), 0) = float(points[i].g[0]);
    q.at2(int(i), 1) = float(points[i].g[1]);
    q.at2(int(i), 2) = float(points[i].g[2]);
    q.at2(int(i), 3) = float(points[i].b_norm);
  }
  return q;
}

namespace {

struct Batch {
  Tensor<float> structurals;  // [n, 3, H, W]
  Tensor<float> q;            // [n, 4]
  Tensor<float> target;       // [n, 1, H, W]
};

Batch make_batch(const DwiDataset& data, const std::vector<int>& indices) {
  const int n = int(indices.size());
  const int h = data.height, w = data.width;
  const std::size_t hw = std::size_t(h) * w;
  Batch b;
  b.structurals = Tensor<float>({n, 3, h, w});
  b.target = Tensor<float>({n, 1, h, w});
  std::vector<QSpacePoint> pts;
  for (int i = 0; i < n; ++i) {
    const std::size_t idx = std::size_t(indices[std::size_t(i)]);
    std::copy_n(data.structurals.data(), 3 * hw,
                b.structurals.ptr() + std::size_t(i) * 3 * hw);
    std::copy_n(data.dwi(idx), hw, b.target.ptr() + std::size_t(i) * hw);
    pts.push_back(data.scheme.points[idx]);
  }
  b.q = q_tensor(pts);
  return b;
}

}  // namespace

StepRecord Trainer::train_step(const DwiDataset& data,
                               const std::vector<int>& batch_indices, long step_index,
                               int epoch) {
  const Batch batch = make_batch(data, batch_indices);
  const float lr_ge = float(lr_at_epoch(tcfg_.lr_g, epoch, tcfg_.lr_decay));
  const float lr_de = float(lr_at_epoch(tcfg_.lr_d, epoch, tcfg_.lr_decay));

  StepRecord rec;
  rec.step = step_index;
  rec.lr_g = lr_ge;
  rec.lr_d = lr_de;

  const ParamList<float> gparams = gen_->params();
  const ParamList<float> dparams = disc_->params();

  try {
    // Generator update (every step).
    zero_grads(gparams);
    zero_grads(dparams);
    Tensor<float> fake = gen_->forward(batch.structurals, batch.q);
    DiscOutput<float> fake_out = disc_->forward(fake, batch.q);
    AdvLossG<float> advg = adv_loss_g(fake_out);

    Tensor<float> grec, gac;
    const float lrec = rec_loss(fake, batch.target, &grec);
    const float lac = ac_loss(fake, batch.target, extractor_, &gac);
    rec.adv_g = advg.value;
    rec.rec = lrec;
    rec.ac = lac;
    rec.total = total_loss(advg.value, lrec, lac, tcfg_.weights);

    Tensor<float> gfake =
        disc_->backward(advg.grad_fake.global_score, advg.grad_fake.pixel_map);
    const float wr = float(tcfg_.weights.lambda_rec), wa = float(tcfg_.weights.lambda_ac);
    for (std::size_t i = 0; i < gfake.numel(); ++i)
      gfake.data[i] += wr * grec.data[i] + wa * gac.data[i];
    gen_->backward(gfake);
    adam_g_.step(gparams, lr_ge);

    // Discriminator: loss recorded every step, update on the schedule.
    if (step_index % tcfg_.d_every == 0) {
      zero_grads(dparams);
      DiscOutput<float> real_out = disc_->forward(batch.target, batch.q);
      AdvLossD<float> advd = adv_loss_d(real_out, fake_out);
      rec.adv_d = advd.value;
      disc_->backward(advd.grad_real.global_score, advd.grad_real.pixel_map);
      disc_->forward(fake, batch.q);  // restore fake activations for the fake half
      disc_->backward(advd.grad_fake.global_score, advd.grad_fake.pixel_map);
      adam_d_.step(dparams, lr_de);
    } else {
      DiscOutput<float> real_out = disc_->forward(batch.target, batch.q);
      rec.adv_d = adv_loss_d(real_out, fake_out).value;
    }
  } catch (const numeric_error& e) {
    throw numeric_error("step " + std::to_string(step_index) + ": " + e.what());
  }
  return rec;
}

void Trainer::run(const DwiDataset& data, const std::vector<int>& train_indices,
                  const std::string& out_dir,
                  const std::function<void(const StepRecord&)>& on_step) {
  if (train_indices.empty()) throw validation_error("Trainer::run: no training points");
  for (int idx : train_indices)
    if (idx < 0 || std::size_t(idx) >= data.scheme.size())
      throw validation_error("Trainer::run: training index out of range");
  if (data.height != gcfg_.height || data.width != gcfg_.width)
    throw validation_error("Trainer::run: dataset shape does not match the model");

  std::ofstream csv;
  if (!out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw io_error("cannot create output directory: " + out_dir);
    const std::string csv_path = (fs::path(out_dir) / "loss.csv").string();
    const bool fresh = epoch_done_ == 0;
    csv.open(csv_path, fresh ? std::ios::trunc : std::ios::app);
    if (!csv) throw io_error("cannot open loss csv: " + csv_path);
    if (fresh) csv << "step,loss_total,loss_adv_g,loss_adv_d,loss_rec,loss_ac,lr_g,lr_d\n";
  }

  char line[256];
  for (int epoch = epoch_done_; epoch < tcfg_.epochs; ++epoch) {
    std::vector<int> order = train_indices;
    rng_.shuffle(order);
    for (std::size_t pos = 0; pos < order.size(); pos += std::size_t(tcfg_.batch_size)) {
      const std::size_t end = std::min(order.size(), pos + std::size_t(tcfg_.batch_size));
      const std::vector<int> chunk(order.begin() + std::ptrdiff_t(pos),
                                   order.begin() + std::ptrdiff_t(end));
      ++step_index_;
      const StepRecord rec = train_step(data, chunk, step_index_, epoch);
      if (csv.is_open()) {
        std::snprintf(line, sizeof line, "%ld,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g\n",
                      rec.step, double(rec.total), double(rec.adv_g), double(rec.adv_d),
                      double(rec.rec), double(rec.ac), double(rec.lr_g), double(rec.lr_d));
        csv << line;
        csv.flush();
      }
      if (on_step) on_step(rec);
    }
    epoch_done_ = epoch + 1;
    if (!out_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof name, "ckpt_epoch_%03d", epoch_done_);
      save_checkpoint((fs::path(out_dir) / name).string(),
                      to_checkpoint(data, train_indices));
    }
  }
  if (!out_dir.empty())
    save_checkpoint((fs::path(out_dir) / "ckpt_final").string(),
                    to_checkpoint(data, train_indices));
}

Checkpoint Trainer::to_checkpoint(const DwiDataset& data,
                                  const std::vector<int>& train_indices) {
  Checkpoint c;
  c.gen_cfg = gcfg_;
  c.disc_cfg = dcfg_;
  c.train_cfg = tcfg_;
  c.b_max = data.scheme.b_max;
  c.epoch = epoch_done_;
  c.step = step_index_;
  c.rng_state = rng_.state();
  c.train_indices = train_indices;
  c.gen_weights = flatten_params(gen_->params());
  c.disc_weights = flatten_params(disc_->params());
  c.adam_g_t = adam_g_.t();
  c.adam_g_m = adam_g_.m();
  c.adam_g_v = adam_g_.v();
  c.adam_d_t = adam_d_.t();
  c.adam_d_m = adam_d_.m();
  c.adam_d_v = adam_d_.v();
  return c;
}

void save_checkpoint(const std::string& dir, const Checkpoint& ckpt) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw io_error("cannot create checkpoint directory: " + dir);

  const std::vector<float> weights = concat(ckpt.gen_weights, ckpt.disc_weights);
  const std::vector<float> opt = concat(concat(ckpt.adam_g_m, ckpt.adam_g_v),
                                        concat(ckpt.adam_d_m, ckpt.adam_d_v));
  write_floats((fs::path(dir) / "weights.bin").string(), weights);
  write_floats((fs::path(dir) / "opt.bin").string(), opt);

  json arch;
  arch["format_version"] = kCkptVersion;
  arch["generator"] = gen_cfg_json(ckpt.gen_cfg);
  arch["discriminator"] = disc_cfg_json(ckpt.disc_cfg);
  arch["train"] = train_cfg_json(ckpt.train_cfg);
  // the parameter manifest documents the fixed flat ordering of weights.bin
  {
    Generator<float> gen(ckpt.gen_cfg);
    Discriminator<float> disc(ckpt.disc_cfg);
    json manifest = json::array();
    std::size_t offset = 0;
    for (const auto& nets : {gen.params(), disc.params()})
      for (const auto& p : nets) {
        manifest.push_back(
            {{"name", p.name}, {"shape", p.value->shape}, {"offset", offset}});
        offset += p.value->numel();
      }
    arch["manifest"] = std::move(manifest);
  }
  arch["b_max"] = ckpt.b_max;
  arch["epoch"] = ckpt.epoch;
  arch["step"] = ckpt.step;
  arch["rng_state"] = std::to_string(ckpt.rng_state);
  arch["train_indices"] = ckpt.train_indices;
  arch["gen_param_count"] = ckpt.gen_weights.size();
  arch["disc_param_count"] = ckpt.disc_weights.size();
  arch["adam_g_t"] = ckpt.adam_g_t;
  arch["adam_d_t"] = ckpt.adam_d_t;
  arch["weights_crc32"] = crc32_of(weights.data(), weights.size() * sizeof(float));
  arch["opt_crc32"] = crc32_of(opt.data(), opt.size() * sizeof(float));
  write_text((fs::path(dir) / "arch.json").string(), arch.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::string& dir) {
  json arch;
  try {
    arch = json::parse(read_text((fs::path(dir) / "arch.json").string()));
  } catch (const json::parse_error& e) {
    throw format_error(dir + "/arch.json: invalid JSON: " + e.what());
  }
  const std::string version = arch.value("format_version", "");
  if (version != kCkptVersion)
    throw format_error(dir + ": checkpoint version '" + version + "' not supported (want " +
                       kCkptVersion + ")");

  Checkpoint c;
  c.gen_cfg = gen_cfg_from_json(arch.at("generator"));
  c.disc_cfg = disc_cfg_from_json(arch.at("discriminator"));
  c.train_cfg = train_cfg_from_json(arch.at("train"));
  c.b_max = arch.at("b_max").get<double>();
  c.epoch = arch.at("epoch").get<int>();
  c.step = arch.at("step").get<long>();
  c.rng_state = std::stoull(arch.at("rng_state").get<std::string>());
  c.train_indices = arch.at("train_indices").get<std::vector<int>>();
  const std::size_t ng = arch.at("gen_param_count").get<std::size_t>();
  const std::size_t nd = arch.at("disc_param_count").get<std::size_t>();
  c.adam_g_t = arch.at("adam_g_t").get<long>();
  c.adam_d_t = arch.at("adam_d_t").get<long>();

  const std::vector<float> weights =
      read_floats((fs::path(dir) / "weights.bin").string(), ng + nd);
  if (crc32_of(weights.data(), weights.size() * sizeof(float)) !=
      arch.at("weights_crc32").get<std::uint32_t>())
    throw format_error(dir + ": weights.bin integrity check failed (stored digest mismatch)");
  c.gen_weights.assign(weights.begin(), weights.begin() + std::ptrdiff_t(ng));
  c.disc_weights.assign(weights.begin() + std::ptrdiff_t(ng), weights.end());

  const std::vector<float> opt =
      read_floats((fs::path(dir) / "opt.bin").string(), 2 * (ng + nd));
  if (crc32_of(opt.data(), opt.size() * sizeof(float)) !=
      arch.at("opt_crc32").get<std::uint32_t>())
    throw format_error(dir + ": opt.bin integrity check failed (stored digest mismatch)");
  auto it = opt.begin();
  c.adam_g_m.assign(it, it + std::ptrdiff_t(ng));
  it += std::ptrdiff_t(ng);
  c.adam_g_v.assign(it, it + std::ptrdiff_t(ng));
  it += std::ptrdiff_t(ng);
  c.adam_d_m.assign(it, it + std::ptrdiff_t(nd));
  it += std::ptrdiff_t(nd);
  c.adam_d_v.assign(it, it + std::ptrdiff_t(nd));
  return c;
}

std::vector<float> synthesize(Generator<float>& gen, const DwiDataset& data,
                              const SamplingScheme& scheme, double b_max_train,
                              int batch_size) {
  if (data.height != gen.cfg.height || data.width != gen.cfg.width)
    throw format_error("synthesize: structural input shape does not match the checkpoint");
  if (b_max_train <= 0.0) throw validation_error("synthesize: b_max_train must be positive");

  const std::size_t hw = std::size_t(data.height) * data.width;
  std::vector<float> out(scheme.size() * hw);

  std::vector<QSpacePoint> pts = scheme.points;
  for (auto& p : pts) {
    p.b_norm = p.b / b_max_train;
    if (p.b_norm > 1.0 + 1e-12)
      throw validation_error("synthesize: b-value " + std::to_string(p.b) +
                             " exceeds the trained range (b_max " +
                             std::to_string(b_max_train) + ")");
  }

  for (std::size_t pos = 0; pos < pts.size(); pos += std::size_t(batch_size)) {
    const std::size_t end = std::min(pts.size(), pos + std::size_t(batch_size));
    const int n = int(end - pos);
    Tensor<float> xs({n, 3, data.height, data.width});
    for (int i = 0; i < n; ++i)
      std::copy_n(data.structurals.data(), 3 * hw, xs.ptr() + std::size_t(i) * 3 * hw);
    const Tensor<float> q =
        q_tensor(std::vector<QSpacePoint>(pts.begin() + std::ptrdiff_t(pos),
                                          pts.begin() + std::ptrdiff_t(end)));
    const Tensor<float> y = gen.forward(xs, q);
    std::copy_n(y.ptr(), std::size_t(n) * hw, out.data() + pos * hw);
  }
  return out;
}

}  // namespace qsynth
