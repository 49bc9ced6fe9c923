#include <set>
#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>

#include "qsynth/analysis.hpp"
#include "qsynth/binio.hpp"
#include "qsynth/container.hpp"
#include "qsynth/errors.hpp"
#include "qsynth/phantom.hpp"
#include "qsynth/png_io.hpp"
#include "qsynth/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace qsynth;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitIo = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitFormat = 4;

// ---------------------------------------------------------------------------
// argument bundles

struct PhantomArgs {
  int size = 64;
  std::uint64_t seed = 7;
  std::vector<double> shells{0, 1000, 2000};
  int dirs = 30;
  double noise_sigma = 0.0;
  std::string bvals, bvecs;
  std::string out;
};

struct TrainArgs {
  std::string data;
  std::string out;
  std::string resume;
  TrainConfig cfg;
  int holdout = 0;
  int base_channels = 32;
  int d_base_channels = 32;
  int n_downsample = 2;
  int n_res_blocks = 4;
  int q_embed_dim = 64;
  int attention_reduction = 8;
  std::uint64_t gen_seed = 1;
  std::uint64_t disc_seed = 2;
};

struct SynthArgs {
  std::string ckpt;
  std::string data;
  std::string bvals, bvecs;
  std::vector<double> shells;
  int dirs = 0;
  std::string out;
};

struct FitArgs {
  std::string data;
  double shell = 1000.0;
  std::string out;
};

struct MetricsArgs {
  std::string a, b;
  std::string out;
  bool no_mask = false;
};

struct PlotArgs {
  std::string in;
  std::string map = "b0";
  int index = 0;
  std::string ref;
  std::string out;
};

// ---------------------------------------------------------------------------
// helpers

SamplingScheme scheme_from_files(const std::string& bvals_path, const std::string& bvecs_path) {
  return load_fsl_tables(read_text(bvals_path), read_text(bvecs_path));
}

std::vector<double> channel_as_doubles(const float* p, std::size_t n) {
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = double(p[i]);
  return out;
}

void echo_json(const std::string& dir, const std::string& name, const json& j) {
  write_text((fs::path(dir) / name).string(), j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// phantom

std::string do_phantom(const PhantomArgs& a) {
  SamplingScheme scheme;
  if (!a.bvals.empty() || !a.bvecs.empty()) {
    if (a.bvals.empty() || a.bvecs.empty())
      throw validation_error("phantom: --bvals and --bvecs must be given together");
    scheme = scheme_from_files(a.bvals, a.bvecs);
  } else {
    scheme = make_shell_scheme(a.shells, a.dirs);
  }
  if (!scheme.has_b0())
    throw validation_error("phantom: scheme needs a b=0 point (add shell 0)");
  if (a.out.empty()) throw validation_error("phantom: --out is required");

  const TensorPhantom phantom = build_phantom(a.size, a.seed);
  const PhantomDataset ds = make_dataset(phantom, scheme, a.noise_sigma, a.seed);
  const DwiDataset disk = to_dwi_dataset(ds, a.seed, a.noise_sigma);
  save_dwi_dataset(a.out, disk);
  const std::string digest = disk.digest();
  std::printf("dataset %s: %zu volumes, %dx%d, digest %s\n", a.out.c_str(),
              scheme.size(), a.size, a.size, digest.c_str());
  return digest;
}

// ---------------------------------------------------------------------------
// train

void do_train(const TrainArgs& a) {
  if (a.out.empty()) throw validation_error("train: --out is required");

  if (!a.resume.empty()) {
    Checkpoint ckpt = load_checkpoint(a.resume);
    const DwiDataset data = load_dwi_dataset(a.data);
    Trainer trainer(ckpt);
    trainer.run(data, ckpt.train_indices, a.out);
    std::printf("resumed training: %d epochs done, %ld steps\n", trainer.epochs_done(),
                trainer.steps_done());
    return;
  }

  a.cfg.validate();
  const DwiDataset data = load_dwi_dataset(a.data);

  GeneratorConfig gcfg;
  gcfg.height = data.height;
  gcfg.width = data.width;
  gcfg.base_channels = a.base_channels;
  gcfg.n_downsample = a.n_downsample;
  gcfg.n_res_blocks = a.n_res_blocks;
  gcfg.q_embed_dim = a.q_embed_dim;
  gcfg.attention_reduction = a.attention_reduction;
  gcfg.seed = a.gen_seed;
  gcfg.validate();

  DiscriminatorConfig dcfg;
  dcfg.height = data.height;
  dcfg.width = data.width;
  dcfg.base_channels = a.d_base_channels;
  dcfg.q_embed_dim = a.q_embed_dim;
  dcfg.seed = a.disc_seed;
  dcfg.validate();

  const std::vector<int> held = holdout_indices(data.scheme, a.holdout);
  std::vector<int> train_idx;
  for (std::size_t i = 0; i < data.scheme.size(); ++i) {
    if (std::find(held.begin(), held.end(), int(i)) == held.end())
      train_idx.push_back(int(i));
  }

  Trainer trainer(gcfg, dcfg, a.cfg);
  trainer.run(data, train_idx, a.out);

  json resolved;
  resolved["data"] = a.data;
  resolved["train"] = {{"batch_size", a.cfg.batch_size},
                       {"epochs", a.cfg.epochs},
                       {"lr_g", a.cfg.lr_g},
                       {"lr_d", a.cfg.lr_d},
                       {"lr_decay", a.cfg.lr_decay},
                       {"d_every", a.cfg.d_every},
                       {"lambda_rec", a.cfg.weights.lambda_rec},
                       {"lambda_ac", a.cfg.weights.lambda_ac},
                       {"seed", a.cfg.seed},
                       {"holdout", a.holdout}};
  resolved["generator"] = {{"base_channels", gcfg.base_channels},
                           {"n_downsample", gcfg.n_downsample},
                           {"n_res_blocks", gcfg.n_res_blocks},
                           {"q_embed_dim", gcfg.q_embed_dim},
                           {"attention_reduction", gcfg.attention_reduction},
                           {"seed", gcfg.seed}};
  resolved["discriminator"] = {{"base_channels", dcfg.base_channels}, {"seed", dcfg.seed}};
  resolved["holdout_indices"] = held;
  echo_json(a.out, "config_resolved.json", resolved);
  std::printf("training done: %d epochs, %ld steps, checkpoints under %s\n",
              trainer.epochs_done(), trainer.steps_done(), a.out.c_str());
}

// ---------------------------------------------------------------------------
// synth

void do_synth(const SynthArgs& a) {
  if (a.out.empty()) throw validation_error("synth: --out is required");
  const Checkpoint ckpt = load_checkpoint(a.ckpt);
  const DwiDataset data = load_dwi_dataset(a.data);

  SamplingScheme scheme;
  if (!a.bvals.empty() || !a.bvecs.empty()) {
    if (a.bvals.empty() || a.bvecs.empty())
      throw validation_error("synth: --bvals and --bvecs must be given together");
    scheme = scheme_from_files(a.bvals, a.bvecs);
  } else if (!a.shells.empty() && a.dirs > 0) {
    scheme = make_shell_scheme(a.shells, a.dirs);
  } else {
    throw validation_error("synth: give --bvals/--bvecs or --shells/--dirs");
  }

  Generator<float> gen(ckpt.gen_cfg);
  unflatten_params(gen.params(), ckpt.gen_weights);
  const std::vector<float> slices = synthesize(gen, data, scheme, ckpt.b_max);

  DwiDataset out;
  out.height = data.height;
  out.width = data.width;
  out.scheme = scheme;
  out.dwis = slices;
  out.structurals = data.structurals;
  out.seed = data.seed;
  out.noise_sigma = 0.0;
  save_dwi_dataset(a.out, out);
  std::printf("synthesized %zu volumes into %s\n", scheme.size(), a.out.c_str());
}

// ---------------------------------------------------------------------------
// fit-dti

void do_fit(const FitArgs& a) {
  if (a.out.empty()) throw validation_error("fit-dti: --out is required");
  const DwiDataset data = load_dwi_dataset(a.data);
  const std::size_t hw = std::size_t(data.height) * data.width;

  std::vector<std::size_t> keep = data.scheme.shell_indices(0.0);
  const std::vector<std::size_t> shell = data.scheme.shell_indices(a.shell);
  keep.insert(keep.end(), shell.begin(), shell.end());
  if (shell.empty())
    throw validation_error("fit-dti: dataset has no shell at b = " + std::to_string(a.shell));

  SamplingScheme sub;
  sub.b_max = data.scheme.b_max;
  std::vector<std::vector<double>> dwis;
  for (std::size_t i : keep) {
    sub.points.push_back(data.scheme.points[i]);
    dwis.push_back(channel_as_doubles(data.dwi(i), hw));
  }
  const DtiFit fit = fit_dti(dwis, sub, data.tissue_mask(), data.height, data.width);

  MapStack maps;
  maps.height = data.height;
  maps.width = data.width;
  maps.channel_names = {"fa", "md", "residual", "mask"};
  maps.data.resize(4 * hw);
  for (std::size_t i = 0; i < hw; ++i) {
    maps.data[i] = float(fit.fa[i]);
    maps.data[hw + i] = float(fit.md[i]);
    maps.data[2 * hw + i] = float(fit.residual[i]);
    maps.data[3 * hw + i] = float(fit.mask[i]);
  }
  save_map_stack(a.out, maps);
  std::printf("fit-dti: wrote fa/md/residual/mask maps to %s\n", a.out.c_str());
}

// ---------------------------------------------------------------------------
// metrics

json metric_entry(const std::vector<double>& x, const std::vector<double>& y, int h, int w,
                  const std::vector<std::uint8_t>* mask) {
  json e;
  e["rmse"] = mask ? rmse_masked(x, y, *mask) : rmse(x, y);
  const double r = e["rmse"].get<double>();
  e["psnr"] = r < 1e-10 ? 100.0 : 20.0 * std::log10(1.0 / r);
  e["ms_ssim"] = ms_ssim(x, y, h, w);
  return e;
}

MetricReport do_metrics(const MetricsArgs& a) {
  json report;
  MetricReport out;
  double sq_sum = 0.0;
  std::size_t n_px = 0;
  double msssim_sum = 0.0;
  std::size_t n_maps = 0;

  auto accumulate = [&](const std::string& name, const std::vector<double>& x,
                        const std::vector<double>& y, int h, int w,
                        const std::vector<std::uint8_t>* mask) {
    const json e = metric_entry(x, y, h, w, mask);
    report["per_map"][name] = e;
    out.per_map[name] = {{"rmse", e["rmse"].get<double>()},
                         {"psnr", e["psnr"].get<double>()},
                         {"ms_ssim", e["ms_ssim"].get<double>()}};
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (mask && !(*mask)[i]) continue;
      const double d = x[i] - y[i];
      sq_sum += d * d;
      ++n_px;
    }
    msssim_sum += e["ms_ssim"].get<double>();
    ++n_maps;
  };

  const json meta_a = json::parse(read_text((fs::path(a.a) / "meta.json").string()));
  const std::string kind = meta_a.value("kind", "");
  if (kind == "dwi-dataset") {
    const DwiDataset da = load_dwi_dataset(a.a);
    const DwiDataset db = load_dwi_dataset(a.b);
    if (da.height != db.height || da.width != db.width ||
        da.scheme.size() != db.scheme.size())
      throw format_error("metrics: containers are not comparable");
    const std::size_t hw = std::size_t(da.height) * da.width;
    std::vector<std::uint8_t> mask = da.tissue_mask();
    const std::vector<std::uint8_t>* m = a.no_mask ? nullptr : &mask;
    char name[32];
    for (std::size_t i = 0; i < da.scheme.size(); ++i) {
      std::snprintf(name, sizeof name, "dwi_%03zu", i);
      accumulate(name, channel_as_doubles(da.dwi(i), hw), channel_as_doubles(db.dwi(i), hw),
                 da.height, da.width, m);
    }
    report["mask"] = !a.no_mask;
  } else if (kind == "maps") {
    const MapStack ma = load_map_stack(a.a);
    const MapStack mb = load_map_stack(a.b);
    if (ma.height != mb.height || ma.width != mb.width)
      throw format_error("metrics: containers are not comparable");
    const std::size_t hw = std::size_t(ma.height) * ma.width;
    std::vector<std::uint8_t> mask(hw, 1);
    bool have_mask = false;
    if (int mc = ma.find_channel("mask"); mc >= 0) {
      have_mask = true;
      for (std::size_t i = 0; i < hw; ++i) mask[i] = ma.channel(std::size_t(mc))[i] > 0.5f;
    }
    const std::vector<std::uint8_t>* m = (!a.no_mask && have_mask) ? &mask : nullptr;
    for (std::size_t c = 0; c < ma.channel_names.size(); ++c) {
      const std::string& name = ma.channel_names[c];
      if (name == "mask") continue;
      const int mbc = mb.find_channel(name);
      if (mbc < 0) continue;
      accumulate(name, channel_as_doubles(ma.channel(c), hw),
                 channel_as_doubles(mb.channel(std::size_t(mbc)), hw), ma.height, ma.width,
                 m);
    }
    report["mask"] = m != nullptr;
  } else {
    throw format_error("metrics: unsupported container kind '" + kind + "'");
  }

  out.rmse = n_px ? std::sqrt(sq_sum / double(n_px)) : 0.0;
  out.psnr = out.rmse < 1e-10 ? 100.0 : 20.0 * std::log10(1.0 / out.rmse);
  out.ms_ssim = n_maps ? msssim_sum / double(n_maps) : 1.0;
  report["rmse"] = out.rmse;
  report["psnr"] = out.psnr;
  report["ms_ssim"] = out.ms_ssim;

  const std::string text = report.dump(2) + "\n";
  if (!a.out.empty())
    write_text(a.out, text);
  else
    std::fputs(text.c_str(), stdout);
  return out;
}

// ---------------------------------------------------------------------------
// plot

std::vector<double> fetch_map(const std::string& dir, const std::string& name, int index,
                              int& h, int& w) {
  const json meta = json::parse(read_text((fs::path(dir) / "meta.json").string()));
  const std::string kind = meta.value("kind", "");
  if (kind == "dwi-dataset") {
    const DwiDataset d = load_dwi_dataset(dir);
    h = d.height;
    w = d.width;
    const std::size_t hw = std::size_t(h) * w;
    if (name == "dwi") {
      if (index < 0 || std::size_t(index) >= d.scheme.size())
        throw validation_error("plot: --index out of range");
      return channel_as_doubles(d.dwi(std::size_t(index)), hw);
    }
    for (int c = 0; c < 3; ++c)
      if (name == std::vector<std::string>{"b0", "t1", "t2"}[std::size_t(c)])
        return channel_as_doubles(d.structural(c), hw);
    throw validation_error("plot: unknown map '" + name + "' for a dwi-dataset");
  }
  if (kind == "maps") {
    const MapStack m = load_map_stack(dir);
    h = m.height;
    w = m.width;
    const int c = m.find_channel(name);
    if (c < 0) throw validation_error("plot: container has no channel '" + name + "'");
    return channel_as_doubles(m.channel(std::size_t(c)), std::size_t(h) * w);
  }
  throw format_error("plot: unsupported container kind '" + kind + "'");
}

std::vector<std::uint8_t> to_gray(const std::vector<double>& v, double lo, double hi) {
  std::vector<std::uint8_t> out(v.size());
  const double span = hi > lo ? hi - lo : 1.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double t = std::clamp((v[i] - lo) / span, 0.0, 1.0);
    out[i] = std::uint8_t(std::lround(t * 255.0));
  }
  return out;
}

void do_plot(const PlotArgs& a) {
  if (a.out.empty()) throw validation_error("plot: --out is required");
  int h = 0, w = 0;
  const std::vector<double> img = fetch_map(a.in, a.map, a.index, h, w);
  auto span = [](const std::vector<double>& v) {
    double lo = v[0], hi = v[0];
    for (double x : v) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
    return std::pair{lo, hi};
  };

  json sidecar;
  sidecar["map"] = a.map;
  sidecar["window"] = "linear";
  if (a.ref.empty()) {
    const auto [lo, hi] = span(img);
    write_png_gray8(a.out, h, w, to_gray(img, lo, hi));
    sidecar["min"] = lo;
    sidecar["max"] = hi;
  } else {
    int h2 = 0, w2 = 0;
    const std::vector<double> ref = fetch_map(a.ref, a.map, a.index, h2, w2);
    if (h2 != h || w2 != w) throw format_error("plot: reference shape mismatch");
    std::vector<double> err(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) err[i] = std::abs(img[i] - ref[i]);
    const auto [lo0, hi0] = span(img);
    const auto [lo1, hi1] = span(ref);
    const auto [lo2, hi2] = span(err);
    const auto g0 = to_gray(img, lo0, hi0);
    const auto g1 = to_gray(ref, lo1, hi1);
    const auto g2 = to_gray(err, lo2, hi2);
    std::vector<std::uint8_t> panel(std::size_t(h) * w * 3);
    for (int y = 0; y < h; ++y) {
      std::copy_n(g0.data() + std::size_t(y) * w, w, panel.data() + std::size_t(y) * 3 * w);
      std::copy_n(g1.data() + std::size_t(y) * w, w,
                  panel.data() + std::size_t(y) * 3 * w + w);
      std::copy_n(g2.data() + std::size_t(y) * w, w,
                  panel.data() + std::size_t(y) * 3 * w + 2 * w);
    }
    write_png_gray8(a.out, h, 3 * w, panel);
    sidecar["panels"] = {{{"name", "input"}, {"min", lo0}, {"max", hi0}},
                         {{"name", "reference"}, {"min", lo1}, {"max", hi1}},
                         {{"name", "abs_error"}, {"min", lo2}, {"max", hi2}}};
  }
  write_text(a.out + ".json", sidecar.dump(2) + "\n");
  std::printf("wrote %s\n", a.out.c_str());
}

// ---------------------------------------------------------------------------
// pipeline: one config file drives phantom -> train -> synth -> fit -> metrics

using IniData = std::map<std::string, std::map<std::string, std::string>>;

IniData parse_ini(const std::string& text) {
  IniData data;
  std::string section;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw format_error("config line " + std::to_string(lineno) + ": bad section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw format_error("config line " + std::to_string(lineno) + ": expected key = value");
    data[section][trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return data;
}

double to_double(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw validation_error("config: bad numeric value for " + what + ": '" + s + "'");
  }
}

std::vector<double> to_double_list(const std::string& s, const std::string& what) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(to_double(tok, what));
  return out;
}

struct RunArgs {
  std::string config;
  std::string out;
  std::vector<std::string> overrides;  // section.key=value
};

void do_run(const RunArgs& ra) {
  if (ra.out.empty()) throw validation_error("run: --out is required");
  IniData ini = parse_ini(read_text(ra.config));
  for (const std::string& ov : ra.overrides) {
    const auto eq = ov.find('=');
    const auto dot = ov.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq)
      throw validation_error("run: override must look like section.key=value: " + ov);
    ini[ov.substr(0, dot)][ov.substr(dot + 1, eq - dot - 1)] = ov.substr(eq + 1);
  }

  const std::set<std::string> known_sections{"phantom", "train", "synth", "fit_dti"};
  for (const auto& [sec, kv] : ini) {
    (void)kv;
    if (!known_sections.count(sec))
      throw validation_error("run: unknown config section [" + sec + "]");
  }

  auto get = [&](const std::string& sec, const std::string& key,
                 const std::string& fallback) {
    const auto s = ini.find(sec);
    if (s == ini.end()) return fallback;
    const auto k = s->second.find(key);
    return k == s->second.end() ? fallback : k->second;
  };

  PhantomArgs pa;
  pa.size = int(to_double(get("phantom", "size", "64"), "phantom.size"));
  pa.seed = std::uint64_t(to_double(get("phantom", "seed", "7"), "phantom.seed"));
  pa.shells = to_double_list(get("phantom", "shells", "0,1000,2000"), "phantom.shells");
  pa.dirs = int(to_double(get("phantom", "dirs", "30"), "phantom.dirs"));
  pa.noise_sigma = to_double(get("phantom", "noise_sigma", "0"), "phantom.noise_sigma");
  pa.out = (fs::path(ra.out) / "data").string();

  TrainArgs ta;
  ta.data = pa.out;
  ta.out = (fs::path(ra.out) / "train").string();
  ta.cfg.batch_size = int(to_double(get("train", "batch_size", "16"), "train.batch_size"));
  ta.cfg.epochs = int(to_double(get("train", "epochs", "50"), "train.epochs"));
  ta.cfg.lr_g = to_double(get("train", "lr_g", "1e-4"), "train.lr_g");
  ta.cfg.lr_d = to_double(get("train", "lr_d", "5e-5"), "train.lr_d");
  ta.cfg.lr_decay = to_double(get("train", "lr_decay", "0.95"), "train.lr_decay");
  ta.cfg.d_every = int(to_double(get("train", "d_every", "2"), "train.d_every"));
  ta.cfg.weights.lambda_rec = to_double(get("train", "lambda_rec", "100"), "train.lambda_rec");
  ta.cfg.weights.lambda_ac = to_double(get("train", "lambda_ac", "100"), "train.lambda_ac");
  ta.cfg.seed = std::uint64_t(to_double(get("train", "seed", "0"), "train.seed"));
  ta.holdout = int(to_double(get("train", "holdout", "0"), "train.holdout"));
  ta.base_channels = int(to_double(get("train", "base_channels", "32"), "train.base_channels"));
  ta.d_base_channels =
      int(to_double(get("train", "d_base_channels", "32"), "train.d_base_channels"));
  ta.n_res_blocks = int(to_double(get("train", "n_res_blocks", "4"), "train.n_res_blocks"));
  ta.n_downsample = int(to_double(get("train", "n_downsample", "2"), "train.n_downsample"));
  ta.q_embed_dim = int(to_double(get("train", "q_embed_dim", "64"), "train.q_embed_dim"));
  ta.attention_reduction =
      int(to_double(get("train", "attention_reduction", "8"), "train.attention_reduction"));
  ta.gen_seed = std::uint64_t(to_double(get("train", "gen_seed", "1"), "train.gen_seed"));
  ta.disc_seed = std::uint64_t(to_double(get("train", "disc_seed", "2"), "train.disc_seed"));

  SynthArgs sa;
  sa.ckpt = (fs::path(ta.out) / "ckpt_final").string();
  sa.data = pa.out;
  sa.shells = to_double_list(get("synth", "shells", "500,1000,2000"), "synth.shells");
  sa.dirs = int(to_double(get("synth", "dirs", "90"), "synth.dirs"));
  sa.out = (fs::path(ra.out) / "synth").string();
  // synthesized schemes need a b0 reference slice for DTI fitting
  if (std::find(sa.shells.begin(), sa.shells.end(), 0.0) == sa.shells.end())
    sa.shells.insert(sa.shells.begin(), 0.0);

  FitArgs fa;
  fa.shell = to_double(get("fit_dti", "shell", "1000"), "fit_dti.shell");

  // every section validates against its module types before any work starts
  if (pa.size < 32) throw validation_error("run: phantom.size must be >= 32");
  make_shell_scheme(pa.shells, pa.dirs);
  ta.cfg.validate();
  {
    GeneratorConfig g;
    g.height = g.width = pa.size;
    g.base_channels = ta.base_channels;
    g.n_downsample = ta.n_downsample;
    g.n_res_blocks = ta.n_res_blocks;
    g.q_embed_dim = ta.q_embed_dim;
    g.attention_reduction = ta.attention_reduction;
    g.validate();
    DiscriminatorConfig d;
    d.height = d.width = pa.size;
    d.base_channels = ta.d_base_channels;
    d.q_embed_dim = ta.q_embed_dim;
    d.validate();
  }
  make_shell_scheme(sa.shells, sa.dirs);
  if (fa.shell <= 0) throw validation_error("run: fit_dti.shell must be positive");

  std::error_code ec;
  fs::create_directories(ra.out, ec);
  if (ec) throw io_error("run: cannot create output directory " + ra.out);
  write_text((fs::path(ra.out) / "config_resolved.ini").string(), [&] {
    std::string s;
    for (const auto& [sec, kv] : ini) {
      s += "[" + sec + "]\n";
      for (const auto& [k, v] : kv) s += k + " = " + v + "\n";
    }
    return s;
  }());

  do_phantom(pa);
  do_train(ta);
  do_synth(sa);

  FitArgs fit_synth = fa;
  fit_synth.data = sa.out;
  fit_synth.out = (fs::path(ra.out) / "dti_synth").string();
  do_fit(fit_synth);
  FitArgs fit_ref = fa;
  fit_ref.data = pa.out;
  fit_ref.out = (fs::path(ra.out) / "dti_ref").string();
  do_fit(fit_ref);

  MetricsArgs ma;
  ma.a = fit_synth.out;
  ma.b = fit_ref.out;
  ma.out = (fs::path(ra.out) / "metrics.json").string();
  const MetricReport rep = do_metrics(ma);
  std::printf("pipeline done: fa/md metrics rmse=%.4g psnr=%.4g ms_ssim=%.4g -> %s\n",
              rep.rmse, rep.psnr, rep.ms_ssim, ma.out.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"q-space conditioned DWI synthesis on an analytic tensor phantom"};
  app.require_subcommand(1);

  PhantomArgs pa;
  auto* cmd_phantom = app.add_subcommand("phantom", "generate a phantom DWI dataset");
  cmd_phantom->add_option("--size", pa.size, "phantom grid size (>= 32)");
  cmd_phantom->add_option("--seed", pa.seed, "phantom/noise seed");
  cmd_phantom->add_option("--shells", pa.shells, "b-values, e.g. --shells 0 1000 2000")
      ->delimiter(',');
  cmd_phantom->add_option("--dirs", pa.dirs, "directions per nonzero shell");
  cmd_phantom->add_option("--noise-sigma", pa.noise_sigma, "Rician noise scale");
  cmd_phantom->add_option("--bvals", pa.bvals, "FSL bvals file (overrides --shells)");
  cmd_phantom->add_option("--bvecs", pa.bvecs, "FSL bvecs file");
  cmd_phantom->add_option("--out", pa.out, "output dataset directory")->required();

  TrainArgs ta;
  auto* cmd_train = app.add_subcommand("train", "train the synthesis model");
  cmd_train->add_option("--data", ta.data, "dataset directory")->required();
  cmd_train->add_option("--out", ta.out, "run output directory")->required();
  cmd_train->add_option("--resume", ta.resume, "checkpoint directory to resume from");
  cmd_train->add_option("--batch-size", ta.cfg.batch_size);
  cmd_train->add_option("--epochs", ta.cfg.epochs);
  cmd_train->add_option("--lr-g", ta.cfg.lr_g);
  cmd_train->add_option("--lr-d", ta.cfg.lr_d);
  cmd_train->add_option("--lr-decay", ta.cfg.lr_decay);
  cmd_train->add_option("--d-every", ta.cfg.d_every);
  cmd_train->add_option("--lambda-rec", ta.cfg.weights.lambda_rec);
  cmd_train->add_option("--lambda-ac", ta.cfg.weights.lambda_ac);
  cmd_train->add_option("--seed", ta.cfg.seed);
  cmd_train->add_option("--holdout", ta.holdout, "directions to exclude from training");
  cmd_train->add_option("--base-channels", ta.base_channels);
  cmd_train->add_option("--d-base-channels", ta.d_base_channels);
  cmd_train->add_option("--n-res-blocks", ta.n_res_blocks);
  cmd_train->add_option("--n-downsample", ta.n_downsample);
  cmd_train->add_option("--q-embed-dim", ta.q_embed_dim);
  cmd_train->add_option("--attention-reduction", ta.attention_reduction);
  cmd_train->add_option("--gen-seed", ta.gen_seed);
  cmd_train->add_option("--disc-seed", ta.disc_seed);

  SynthArgs sa;
  auto* cmd_synth = app.add_subcommand("synth", "synthesize DWIs at new q-space points");
  cmd_synth->add_option("--ckpt", sa.ckpt, "checkpoint directory")->required();
  cmd_synth->add_option("--data", sa.data, "dataset directory providing structurals")
      ->required();
  cmd_synth->add_option("--bvals", sa.bvals);
  cmd_synth->add_option("--bvecs", sa.bvecs);
  cmd_synth->add_option("--shells", sa.shells)->delimiter(',');
  cmd_synth->add_option("--dirs", sa.dirs);
  cmd_synth->add_option("--out", sa.out, "output dataset directory")->required();

  FitArgs fa;
  auto* cmd_fit = app.add_subcommand("fit-dti", "tensor fit and FA/MD maps");
  cmd_fit->add_option("--data", fa.data, "dataset directory")->required();
  cmd_fit->add_option("--shell", fa.shell, "shell b-value to fit (plus b=0)");
  cmd_fit->add_option("--out", fa.out, "output maps directory")->required();

  MetricsArgs ma;
  auto* cmd_metrics = app.add_subcommand("metrics", "image quality metrics between containers");
  cmd_metrics->add_option("--a", ma.a, "first container")->required();
  cmd_metrics->add_option("--b", ma.b, "second container")->required();
  cmd_metrics->add_option("--out", ma.out, "write the JSON report here instead of stdout");
  cmd_metrics->add_flag("--no-mask", ma.no_mask, "compare all pixels, not just tissue");

  PlotArgs pla;
  auto* cmd_plot = app.add_subcommand("plot", "render a stored map as 8-bit grayscale PNG");
  cmd_plot->add_option("--in", pla.in, "container directory")->required();
  cmd_plot->add_option("--map", pla.map, "map name (b0/t1/t2/dwi or a maps channel)");
  cmd_plot->add_option("--index", pla.index, "volume index when --map dwi");
  cmd_plot->add_option("--ref", pla.ref, "reference container for a side-by-side error panel");
  cmd_plot->add_option("--out", pla.out, "output PNG path")->required();

  RunArgs ra;
  auto* cmd_run = app.add_subcommand("run", "full pipeline from one config file");
  cmd_run->add_option("--config", ra.config, "INI config with [phantom]/[train]/[synth]/[fit_dti]")
      ->required();
  cmd_run->add_option("--out", ra.out, "pipeline output directory")->required();
  cmd_run->add_option("--set", ra.overrides, "override: section.key=value")->take_all();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitValidation;
  }

  try {
    if (cmd_phantom->parsed()) do_phantom(pa);
    if (cmd_train->parsed()) do_train(ta);
    if (cmd_synth->parsed()) do_synth(sa);
    if (cmd_fit->parsed()) do_fit(fa);
    if (cmd_metrics->parsed()) do_metrics(ma);
    if (cmd_plot->parsed()) do_plot(pla);
    if (cmd_run->parsed()) do_run(ra);
  } catch (const validation_error& e) {
    std::fprintf(stderr, "validation error: %s\n", e.what());
    return kExitValidation;
  } catch (const io_error& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return kExitIo;
  } catch (const numeric_error& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return kExitNumeric;
  } catch (const format_error& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return kExitFormat;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitIo;
  }
  return 0;
}
