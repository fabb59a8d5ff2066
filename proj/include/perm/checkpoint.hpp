#pragma once

// Versioned JSON checkpoints for PermModel.
//
// {
//   "format": "perm-checkpoint", "version": 1, "trained": bool,
//   "config": {latent_dim, hidden, learning_rate, batch_size, epochs,
//              kl_weight, kl_anneal_fraction, window, seed (decimal string),
//              response_sd (null when learned)},
//   "normalizer": {mean, sd, count},
//   "response_head": {"kind": "softplus"|"signed", "weight_raw": [...], "log_sd": x},
//   "networks": {"difficulty_encoder"|"ability_encoder"|"level_decoder":
//                 [{"in", "out", "activation": "tanh"|"identity",
//                   "weights": row-major out*in, "bias": out}]}
// }
//
// Doubles are written with 17 significant digits, so save -> load -> save is
// byte-identical.

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "perm/dense.hpp"
#include "perm/error.hpp"
#include "perm/irt.hpp"
#include "perm/model.hpp"

namespace perm {

inline constexpr const char* kCheckpointFormat = "perm-checkpoint";

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"latent_dim", c.latent_dim},
                     {"hidden", c.hidden},
                     {"learning_rate", c.learning_rate},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"kl_weight", c.kl_weight},
                     {"kl_anneal_fraction", c.kl_anneal_fraction},
                     {"window", c.window},
                     {"seed", std::to_string(c.seed)},
                     {"response_sd", c.response_sd ? nlohmann::json(*c.response_sd) : nlohmann::json(nullptr)}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("latent_dim").get_to(c.latent_dim);
  j.at("hidden").get_to(c.hidden);
  j.at("learning_rate").get_to(c.learning_rate);
  j.at("batch_size").get_to(c.batch_size);
  j.at("epochs").get_to(c.epochs);
  j.at("kl_weight").get_to(c.kl_weight);
  j.at("kl_anneal_fraction").get_to(c.kl_anneal_fraction);
  j.at("window").get_to(c.window);
  const auto& seed = j.at("seed");
  c.seed = seed.is_string() ? std::stoull(seed.get<std::string>()) : seed.get<std::uint64_t>();
  c.response_sd.reset();
  if (j.contains("response_sd") && !j.at("response_sd").is_null()) c.response_sd = j.at("response_sd").get<double>();
}

inline void to_json(nlohmann::json& j, const Normalizer& n) {
  j = nlohmann::json{{"mean", n.mean}, {"sd", n.sd}, {"count", n.count}};
}

inline void from_json(const nlohmann::json& j, Normalizer& n) {
  j.at("mean").get_to(n.mean);
  j.at("sd").get_to(n.sd);
  j.at("count").get_to(n.count);
}

namespace detail {

inline nlohmann::json net_to_json(const DenseNet& net) {
  auto layers = nlohmann::json::array();
  for (const auto& layer : net.layers()) {
    std::vector<double> w;
    w.reserve(static_cast<std::size_t>(layer.weight.size()));
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) w.push_back(layer.weight(r, c));
    }
    std::vector<double> b(layer.bias.data(), layer.bias.data() + layer.bias.size());
    layers.push_back({{"in", layer.inputs()},
                      {"out", layer.outputs()},
                      {"activation", layer.activation == Activation::kTanh ? "tanh" : "identity"},
                      {"weights", w},
                      {"bias", b}});
  }
  return layers;
}

inline DenseNet net_from_json(const nlohmann::json& j) {
  std::vector<DenseLayer> layers;
  for (const auto& lj : j) {
    const auto in = lj.at("in").get<Eigen::Index>();
    const auto out = lj.at("out").get<Eigen::Index>();
    const auto act = lj.at("activation").get<std::string>();
    const auto w = lj.at("weights").get<std::vector<double>>();
    const auto b = lj.at("bias").get<std::vector<double>>();
    if (in <= 0 || out <= 0 || static_cast<Eigen::Index>(w.size()) != in * out ||
        static_cast<Eigen::Index>(b.size()) != out) {
      throw Error(ErrorCode::kFormat, "layer blob sizes do not match in/out");
    }
    if (act != "tanh" && act != "identity") throw Error(ErrorCode::kFormat, "unknown activation '" + act + "'");
    DenseLayer layer;
    layer.weight.resize(out, in);
    for (Eigen::Index r = 0; r < out; ++r) {
      for (Eigen::Index c = 0; c < in; ++c) layer.weight(r, c) = w[static_cast<std::size_t>(r * in + c)];
    }
    layer.bias = Eigen::Map<const Eigen::VectorXd>(b.data(), out);
    layer.activation = act == "tanh" ? Activation::kTanh : Activation::kIdentity;
    layers.push_back(std::move(layer));
  }
  try {
    return DenseNet(std::move(layers));
  } catch (const Error& e) {
    throw Error(ErrorCode::kFormat, e.what());
  }
}

}  // namespace detail

inline nlohmann::json checkpoint_to_json(const PermModel& model) {
  const auto& raw = model.response_weight_raw();
  return nlohmann::json{
      {"format", kCheckpointFormat},
      {"version", kModelFormatVersion},
      {"trained", model.trained()},
      {"config", model.config()},
      {"normalizer", model.normalizer()},
      {"response_head",
       {{"kind", model.response_head() == ResponseHead::kSigned ? "signed" : "softplus"},
        {"weight_raw", std::vector<double>(raw.data(), raw.data() + raw.size())},
        {"log_sd", model.log_response_sd()}}},
      {"networks",
       {{"difficulty_encoder", detail::net_to_json(model.difficulty_encoder())},
        {"ability_encoder", detail::net_to_json(model.ability_encoder())},
        {"level_decoder", detail::net_to_json(model.level_decoder())}}}};
}

inline PermModel checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (!j.is_object() || j.value("format", std::string{}) != kCheckpointFormat) {
      throw Error(ErrorCode::kFormat, "not a perm checkpoint");
    }
    const int version = j.at("version").get<int>();
    if (version != kModelFormatVersion) {
      throw Error(ErrorCode::kVersion, "checkpoint version " + std::to_string(version) + ", expected " +
                                           std::to_string(kModelFormatVersion));
    }
    const auto& head = j.at("response_head");
    const auto kind = head.at("kind").get<std::string>();
    if (kind != "softplus" && kind != "signed") throw Error(ErrorCode::kFormat, "unknown response head '" + kind + "'");
    const auto raw = head.at("weight_raw").get<std::vector<double>>();
    const auto& nets = j.at("networks");
    auto model = PermModel::from_parts(
        j.at("config").get<TrainConfig>(), j.at("normalizer").get<Normalizer>(),
        detail::net_from_json(nets.at("difficulty_encoder")), detail::net_from_json(nets.at("ability_encoder")),
        detail::net_from_json(nets.at("level_decoder")),
        Eigen::Map<const Eigen::VectorXd>(raw.data(), static_cast<Eigen::Index>(raw.size())),
        head.at("log_sd").get<double>(), j.at("trained").get<bool>(),
        kind == "signed" ? ResponseHead::kSigned : ResponseHead::kSoftplus);
    if (!model.all_finite()) throw Error(ErrorCode::kFormat, "checkpoint contains non-finite weights");
    return model;
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kVersion || e.code() == ErrorCode::kFormat) throw;
    throw Error(ErrorCode::kFormat, e.what());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kFormat, std::string("malformed checkpoint: ") + e.what());
  }
}

inline std::string checkpoint_to_string(const PermModel& model) { return checkpoint_to_json(model).dump(1) + "\n"; }

inline PermModel checkpoint_from_string(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kFormat, std::string("unreadable checkpoint: ") + e.what());
  }
  return checkpoint_from_json(j);
}

inline void save_checkpoint(const PermModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path + " for writing");
  out << checkpoint_to_string(model);
  if (!out) throw Error(ErrorCode::kIo, "write failed for " + path);
}

inline PermModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_string(ss.str());
}

}  // namespace perm
