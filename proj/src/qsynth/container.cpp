#include "qsynth/container.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>

#include "qsynth/binio.hpp"
#include "qsynth/errors.hpp"

namespace qsynth {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kFormatVersion = "1";

void check_meta_encoding(const json& meta, const std::string& dir) {
  if (meta.value("format_version", "") != kFormatVersion)
    throw format_error(dir + ": unsupported container format_version");
  if (meta.value("dtype", "") != "float32")
    throw format_error(dir + ": unsupported dtype, expected float32");
  if (meta.value("byte_order", "") != "little-endian")
    throw format_error(dir + ": unsupported byte order");
}

json load_meta(const std::string& dir) {
  const std::string path = (fs::path(dir) / "meta.json").string();
  json meta;
  try {
    meta = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw format_error(path + ": invalid JSON: " + e.what());
  }
  return meta;
}

}  // namespace

std::vector<std::uint8_t> DwiDataset::tissue_mask() const {
  const std::size_t hw = std::size_t(height) * width;
  std::vector<std::uint8_t> m(hw);
  const float* b0 = structural(0);
  for (std::size_t i = 0; i < hw; ++i) m[i] = b0[i] > 0.5f ? 1 : 0;
  return m;
}

std::string DwiDataset::digest() const {
  std::uint64_t h = fnv1a64(dwis.data(), dwis.size() * sizeof(float));
  h = fnv1a64(structurals.data(), structurals.size() * sizeof(float), h);
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

DwiDataset to_dwi_dataset(const PhantomDataset& ds, std::uint64_t seed, double noise_sigma) {
  DwiDataset out;
  out.height = ds.height;
  out.width = ds.width;
  out.scheme = ds.scheme;
  out.seed = seed;
  out.noise_sigma = noise_sigma;
  const std::size_t hw = std::size_t(ds.height) * ds.width;
  out.dwis.resize(ds.dwis.size() * hw);
  for (std::size_t i = 0; i < ds.dwis.size(); ++i)
    for (std::size_t j = 0; j < hw; ++j) out.dwis[i * hw + j] = float(ds.dwis[i][j]);
  out.structurals.resize(3 * hw);
  for (std::size_t j = 0; j < 3 * hw; ++j) out.structurals[j] = float(ds.structurals[j]);
  return out;
}

void save_dwi_dataset(const std::string& dir, const DwiDataset& ds) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw io_error("cannot create directory: " + dir);

  json meta;
  meta["format_version"] = kFormatVersion;
  meta["kind"] = "dwi-dataset";
  meta["height"] = ds.height;
  meta["width"] = ds.width;
  meta["channel_names"] = {"b0", "t1", "t2"};
  meta["num_volumes"] = ds.scheme.size();
  meta["bvals_file"] = "bvals";
  meta["bvecs_file"] = "bvecs";
  meta["seed"] = ds.seed;
  meta["noise_sigma"] = ds.noise_sigma;
  meta["dtype"] = "float32";
  meta["byte_order"] = "little-endian";
  write_text((fs::path(dir) / "meta.json").string(), meta.dump(2) + "\n");

  write_floats((fs::path(dir) / "dwis.bin").string(), ds.dwis);
  write_floats((fs::path(dir) / "structurals.bin").string(), ds.structurals);
  const auto [bvals, bvecs] = save_fsl_tables(ds.scheme);
  write_text((fs::path(dir) / "bvals").string(), bvals);
  write_text((fs::path(dir) / "bvecs").string(), bvecs);
}

DwiDataset load_dwi_dataset(const std::string& dir) {
  const json meta = load_meta(dir);
  check_meta_encoding(meta, dir);
  if (meta.value("kind", "") != "dwi-dataset")
    throw format_error(dir + ": not a dwi-dataset container");

  DwiDataset ds;
  ds.height = meta.at("height").get<int>();
  ds.width = meta.at("width").get<int>();
  ds.seed = meta.value("seed", std::uint64_t(0));
  ds.noise_sigma = meta.value("noise_sigma", 0.0);
  if (ds.height < 1 || ds.width < 1) throw format_error(dir + ": invalid shape");

  ds.scheme = load_fsl_tables(
      read_text((fs::path(dir) / meta.value("bvals_file", "bvals")).string()),
      read_text((fs::path(dir) / meta.value("bvecs_file", "bvecs")).string()));
  const std::size_t n = meta.at("num_volumes").get<std::size_t>();
  if (n != ds.scheme.size())
    throw format_error(dir + ": num_volumes does not match gradient table length");

  const std::size_t hw = std::size_t(ds.height) * ds.width;
  ds.dwis = read_floats((fs::path(dir) / "dwis.bin").string(), n * hw);
  ds.structurals = read_floats((fs::path(dir) / "structurals.bin").string(), 3 * hw);
  return ds;
}

int MapStack::find_channel(const std::string& name) const {
  for (std::size_t i = 0; i < channel_names.size(); ++i)
    if (channel_names[i] == name) return int(i);
  return -1;
}

void save_map_stack(const std::string& dir, const MapStack& maps) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw io_error("cannot create directory: " + dir);

  json meta;
  meta["format_version"] = kFormatVersion;
  meta["kind"] = "maps";
  meta["height"] = maps.height;
  meta["width"] = maps.width;
  meta["channel_names"] = maps.channel_names;
  meta["dtype"] = "float32";
  meta["byte_order"] = "little-endian";
  write_text((fs::path(dir) / "meta.json").string(), meta.dump(2) + "\n");
  write_floats((fs::path(dir) / "maps.bin").string(), maps.data);
}

MapStack load_map_stack(const std::string& dir) {
  const json meta = load_meta(dir);
  check_meta_encoding(meta, dir);
  if (meta.value("kind", "") != "maps")
    throw format_error(dir + ": not a maps container");
  MapStack maps;
  maps.height = meta.at("height").get<int>();
  maps.width = meta.at("width").get<int>();
  maps.channel_names = meta.at("channel_names").get<std::vector<std::string>>();
  maps.data = read_floats((fs::path(dir) / "maps.bin").string(),
                          maps.channel_names.size() * std::size_t(maps.height) * maps.width);
  return maps;
}

}  // namespace qsynth
