#pragma once

// Checkpoint container: an 8-byte little-endian header length, a JSON header
// {format_version, config, tensors: name -> {shape, dtype, offset}}, then raw
// little-endian tensor payloads. f64 round-trips bit-exactly; f32 payloads are
// promoted to f64 on load.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "iclgd/model.hpp"

namespace iclgd {

constexpr int kCheckpointFormatVersion = 1;

namespace detail {

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},         {"n_heads", c.n_heads},
          {"d_model", c.d_model},           {"vocab_size", c.vocab_size},
          {"max_seq_len", c.max_seq_len},   {"mlp_ratio", c.mlp_ratio},
          {"layer_norm_eps", c.layer_norm_eps}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
  c.layer_norm_eps = j.at("layer_norm_eps").get<double>();
  return c;
}

inline void write_u64_le(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64_le(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw std::runtime_error("checkpoint: truncated header length");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const Parameters& params, const std::string& path) {
  nlohmann::json header;
  header["format_version"] = kCheckpointFormatVersion;
  header["config"] = detail::config_to_json(params.config);
  nlohmann::json tensors = nlohmann::json::object();
  std::uint64_t offset = 0;
  params.for_each([&](const std::string& name, const Tensor& t) {
    tensors[name] = {{"shape", t.shape}, {"dtype", "f64"}, {"offset", offset}};
    offset += t.size() * sizeof(double);
  });
  header["tensors"] = tensors;
  std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  detail::write_u64_le(out, hs.size());
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  params.for_each([&](const std::string&, const Tensor& t) {
    // Assumes little-endian host doubles, as the format specifies.
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  });
  if (!out) throw std::runtime_error("save_checkpoint: write failed: " + path);
}

// Header-only peek, used by the inspect subcommand.
inline nlohmann::json read_checkpoint_header(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::uint64_t hlen = detail::read_u64_le(in);
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw std::runtime_error("load_checkpoint: truncated header");
  nlohmann::json header = nlohmann::json::parse(hs, nullptr, false);
  if (header.is_discarded()) {
    throw std::runtime_error("load_checkpoint: malformed header JSON");
  }
  return header;
}

inline Parameters load_checkpoint(
    const std::string& path,
    const std::optional<ModelConfig>& expected = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::uint64_t hlen = detail::read_u64_le(in);
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw std::runtime_error("load_checkpoint: truncated header");
  nlohmann::json header = nlohmann::json::parse(hs, nullptr, false);
  if (header.is_discarded()) {
    throw std::runtime_error("load_checkpoint: malformed header JSON");
  }
  int version = header.at("format_version").get<int>();
  if (version != kCheckpointFormatVersion) {
    throw std::runtime_error("load_checkpoint: unsupported format_version " +
                             std::to_string(version));
  }
  ModelConfig cfg = detail::config_from_json(header.at("config"));
  if (expected) {
    auto mismatch = [&](const char* field, auto got, auto want) {
      if (got != want) {
        throw std::runtime_error(std::string("load_checkpoint: config field ") +
                                 field + " mismatch");
      }
    };
    mismatch("n_layers", cfg.n_layers, expected->n_layers);
    mismatch("n_heads", cfg.n_heads, expected->n_heads);
    mismatch("d_model", cfg.d_model, expected->d_model);
    mismatch("vocab_size", cfg.vocab_size, expected->vocab_size);
    mismatch("max_seq_len", cfg.max_seq_len, expected->max_seq_len);
    mismatch("mlp_ratio", cfg.mlp_ratio, expected->mlp_ratio);
  }
  Parameters params = make_empty_params(cfg);
  std::uint64_t payload_start = 8 + hlen;
  const nlohmann::json& tensors = header.at("tensors");

  std::vector<std::string> bad;
  for (auto it = tensors.begin(); it != tensors.end(); ++it) {
    if (params.find(it.key()) == nullptr) bad.push_back(it.key());
  }
  params.for_each([&](const std::string& name, Tensor&) {
    if (!tensors.contains(name)) bad.push_back(name);
  });
  if (!bad.empty()) {
    std::string msg = "load_checkpoint: tensor directory mismatch:";
    for (const auto& n : bad) msg += " " + n;
    throw std::runtime_error(msg);
  }

  std::vector<std::string> shape_bad;
  params.for_each([&](const std::string& name, Tensor& t) {
    const nlohmann::json& entry = tensors.at(name);
    auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    if (shape != t.shape) {
      shape_bad.push_back(name);
      return;
    }
    std::string dtype = entry.at("dtype").get<std::string>();
    std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
    in.seekg(static_cast<std::streamoff>(payload_start + offset));
    if (dtype == "f64") {
      in.read(reinterpret_cast<char*>(t.data.data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
    } else if (dtype == "f32") {
      std::vector<float> tmp(t.size());
      in.read(reinterpret_cast<char*>(tmp.data()),
              static_cast<std::streamsize>(t.size() * sizeof(float)));
      for (std::size_t i = 0; i < t.size(); ++i)
        t.data[i] = static_cast<double>(tmp[i]);
    } else {
      throw std::runtime_error("load_checkpoint: unknown dtype " + dtype +
                               " for tensor " + name);
    }
    if (!in) {
      throw std::runtime_error("load_checkpoint: truncated payload at tensor " +
                               name);
    }
  });
  if (!shape_bad.empty()) {
    std::string msg = "load_checkpoint: shape mismatch:";
    for (const auto& n : shape_bad) msg += " " + n;
    throw std::runtime_error(msg);
  }
  return params;
}

enum class InitScheme { random, trained_checkpoint };

// Spec-level initializer covering both schemes.
inline Parameters init_params(const ModelConfig& cfg, std::uint64_t seed,
                              InitScheme scheme,
                              const std::string& checkpoint_path = "") {
  if (scheme == InitScheme::random) return init_params(cfg, seed);
  return load_checkpoint(checkpoint_path, cfg);
}

}  // namespace iclgd
