#pragma once

// Checkpoint format: <prefix>.json holds the architecture, seed, step count
// and the parameter order; <prefix>.bin is the concatenation of all parameter
// arrays as little-endian float64 in manifest order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "meanflow/net.hpp"

namespace meanflow {

namespace detail {

inline void to_little_endian(std::vector<double>& xs) {
  if constexpr (std::endian::native == std::endian::big) {
    for (double& x : xs) {
      std::uint64_t bits;
      std::memcpy(&bits, &x, sizeof bits);
      bits = __builtin_bswap64(bits);
      std::memcpy(&x, &bits, sizeof bits);
    }
  }
}

}  // namespace detail

struct Checkpoint {
  VelocityModel model;
  std::uint64_t seed = 0;
  int step = 0;
};

inline void save_checkpoint(const VelocityModel& model, const std::string& prefix,
                            std::uint64_t seed, int step) {
  nlohmann::json manifest;
  manifest["format"] = "meanflow-checkpoint";
  manifest["version"] = 1;
  manifest["dtype"] = "float64-le";
  manifest["seed"] = seed;
  manifest["step"] = step;
  manifest["arch"] = {
      {"data_dim", model.cfg.data_dim},
      {"hidden", model.cfg.hidden},
      {"time_embed_dim", model.cfg.time_embed_dim},
      {"num_conditions", model.cfg.num_conditions},
      {"cond_embed_dim", model.cfg.cond_embed_dim},
      {"activation", activation_name(model.cfg.activation)},
  };
  nlohmann::json params = nlohmann::json::array();
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    params.push_back({{"name", model.param_names[i]}, {"shape", model.params[i].shape()}});
  }
  manifest["params"] = params;

  std::ofstream mf(prefix + ".json");
  if (!mf) throw std::runtime_error("cannot write " + prefix + ".json");
  mf << manifest.dump(2) << "\n";

  std::ofstream bf(prefix + ".bin", std::ios::binary);
  if (!bf) throw std::runtime_error("cannot write " + prefix + ".bin");
  for (const auto& p : model.params) {
    std::vector<double> buf = p.data();
    detail::to_little_endian(buf);
    bf.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(double)));
  }
}

inline Checkpoint load_checkpoint(const std::string& prefix) {
  std::ifstream mf(prefix + ".json");
  if (!mf) throw std::invalid_argument("cannot read " + prefix + ".json");
  nlohmann::json manifest = nlohmann::json::parse(mf);
  if (manifest.value("format", "") != "meanflow-checkpoint") {
    throw std::invalid_argument("not a checkpoint manifest: " + prefix + ".json");
  }

  NetConfig cfg;
  const auto& arch = manifest.at("arch");
  cfg.data_dim = arch.at("data_dim").get<int>();
  cfg.hidden = arch.at("hidden").get<std::vector<int>>();
  cfg.time_embed_dim = arch.at("time_embed_dim").get<int>();
  cfg.num_conditions = arch.at("num_conditions").get<int>();
  cfg.cond_embed_dim = arch.at("cond_embed_dim").get<int>();
  cfg.activation = activation_from_name(arch.at("activation").get<std::string>());

  Checkpoint ck;
  ck.seed = manifest.at("seed").get<std::uint64_t>();
  ck.step = manifest.at("step").get<int>();
  ck.model = init_model(cfg, ck.seed);

  const auto& params = manifest.at("params");
  if (params.size() != ck.model.params.size()) {
    throw std::invalid_argument("checkpoint parameter list does not match architecture");
  }

  std::ifstream bf(prefix + ".bin", std::ios::binary);
  if (!bf) throw std::invalid_argument("cannot read " + prefix + ".bin");
  for (std::size_t i = 0; i < ck.model.params.size(); ++i) {
    const auto shape = params[i].at("shape").get<std::vector<int>>();
    if (params[i].at("name").get<std::string>() != ck.model.param_names[i] ||
        shape != ck.model.params[i].shape()) {
      throw std::invalid_argument("checkpoint parameter mismatch at index " + std::to_string(i));
    }
    auto& dst = ck.model.params[i].mutable_data();
    bf.read(reinterpret_cast<char*>(dst.data()),
            static_cast<std::streamsize>(dst.size() * sizeof(double)));
    if (!bf) throw std::invalid_argument("checkpoint blob truncated");
    detail::to_little_endian(dst);
    for (double v : dst) {
      if (!std::isfinite(v)) throw NumericError("checkpoint contains non-finite parameters");
    }
  }
  bf.peek();
  if (!bf.eof()) throw std::invalid_argument("checkpoint blob has trailing bytes");
  return ck;
}

}  // namespace meanflow
