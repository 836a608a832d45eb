#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffcap/adamw.hpp"
#include "diffcap/model.hpp"

namespace diffcap {

inline std::string timestep_mode_name(TimestepMode m) {
  switch (m) {
    case TimestepMode::kSinusoidal: return "sinusoidal";
    case TimestepMode::kLearned: return "learned";
    case TimestepMode::kNone: return "none";
  }
  return "sinusoidal";
}

inline TimestepMode timestep_mode_from_name(const std::string& s) {
  if (s == "sinusoidal") return TimestepMode::kSinusoidal;
  if (s == "learned") return TimestepMode::kLearned;
  if (s == "none") return TimestepMode::kNone;
  throw UsageError("unknown timestep mode \"" + s + "\"");
}

inline std::string mask_mode_name(AttnMaskMode m) {
  switch (m) {
    case AttnMaskMode::kFull: return "full";
    case AttnMaskMode::kCam: return "cam";
    case AttnMaskMode::kCamM2mOnly: return "cam_m2m_only";
    case AttnMaskMode::kCamT2mOnly: return "cam_t2m_only";
    case AttnMaskMode::kCausal: return "causal";
  }
  return "cam";
}

inline AttnMaskMode mask_mode_from_name(const std::string& s) {
  if (s == "full") return AttnMaskMode::kFull;
  if (s == "cam") return AttnMaskMode::kCam;
  if (s == "cam_m2m_only") return AttnMaskMode::kCamM2mOnly;
  if (s == "cam_t2m_only") return AttnMaskMode::kCamT2mOnly;
  if (s == "causal") return AttnMaskMode::kCausal;
  throw UsageError("unknown attention mask mode \"" + s + "\"");
}

inline nlohmann::json config_to_json(const DenoiserConfig& c) {
  return nlohmann::json{{"layers", c.layers},
                        {"d_model", c.d_model},
                        {"heads", c.heads},
                        {"d_ff", c.d_ff},
                        {"l_max", c.l_max},
                        {"vocab", c.vocab},
                        {"total_steps", c.total_steps},
                        {"step_scale", c.step_scale},
                        {"uniform_frac", c.uniform_frac},
                        {"cond_slots", c.cond_slots},
                        {"cond_dim", c.cond_dim},
                        {"timestep_mode", timestep_mode_name(c.timestep_mode)}};
}

inline DenoiserConfig config_from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.layers = j.at("layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.heads = j.at("heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.l_max = j.at("l_max").get<int>();
  c.vocab = j.at("vocab").get<int>();
  c.total_steps = j.at("total_steps").get<int>();
  c.step_scale = j.at("step_scale").get<double>();
  c.uniform_frac = j.at("uniform_frac").get<double>();
  c.cond_slots = j.at("cond_slots").get<int>();
  c.cond_dim = j.at("cond_dim").get<int>();
  c.timestep_mode = timestep_mode_from_name(j.at("timestep_mode").get<std::string>());
  c.validate();
  return c;
}

namespace detail {

template <typename S>
constexpr const char* dtype_name() {
  if constexpr (sizeof(S) == 4)
    return "f32";
  else
    return "f64";
}

template <typename S>
void append_le(std::string& buf, const Tensor<S>& t) {
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    if constexpr (sizeof(S) == 4) {
      std::uint32_t u = std::bit_cast<std::uint32_t>((float)t.data[i]);
      for (int b = 0; b < 4; ++b) buf.push_back((char)((u >> (8 * b)) & 0xff));
    } else {
      std::uint64_t u = std::bit_cast<std::uint64_t>((double)t.data[i]);
      for (int b = 0; b < 8; ++b) buf.push_back((char)((u >> (8 * b)) & 0xff));
    }
  }
}

template <typename S>
void read_le(const std::string& buf, std::uint64_t offset, Tensor<S>& t) {
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    std::uint64_t base = offset + (std::uint64_t)i * sizeof(S);
    if constexpr (sizeof(S) == 4) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) u |= (std::uint32_t)(std::uint8_t)buf[base + (std::uint64_t)b] << (8 * b);
      t.data[i] = std::bit_cast<float>(u);
    } else {
      std::uint64_t u = 0;
      for (int b = 0; b < 8; ++b) u |= (std::uint64_t)(std::uint8_t)buf[base + (std::uint64_t)b] << (8 * b);
      t.data[i] = std::bit_cast<double>(u);
    }
  }
}

inline nlohmann::json shape_json(const Shape& s) {
  nlohmann::json a = nlohmann::json::array();
  for (int e : s) a.push_back(e);
  return a;
}

inline Shape shape_from_json(const nlohmann::json& a) {
  Shape s;
  for (const auto& e : a) s.push_back(e.get<int>());
  return s;
}

}  // namespace detail

constexpr int kCheckpointVersion = 1;

/// Optimizer slice of a checkpoint, parallel to the parameter visit order.
template <typename S>
struct OptimizerState {
  std::int64_t step = 0;
  std::vector<Tensor<S>> m1, m2;
};

template <typename S>
struct LoadedCheckpoint {
  DenoiserParams<S> params;
  std::vector<std::string> vocab_words;
  std::string train_mode = "diffusion";  // "diffusion" or "ar"
  AttnMaskMode attn_mode = AttnMaskMode::kCam;
  std::int64_t step = 0;
  bool has_optimizer = false;
  OptimizerState<S> optimizer;
};

/// Layout: u64 little-endian header length, JSON header, then raw
/// little-endian arrays at the recorded offsets (relative to the data
/// section start), parameters in visit order followed by any optimizer
/// moments.
template <typename S>
void save_checkpoint(const std::string& path, const DenoiserParams<S>& params,
                     const std::vector<std::string>& vocab_words, const std::string& train_mode,
                     AttnMaskMode attn_mode, std::int64_t step,
                     const OptimizerState<S>* opt = nullptr) {
  nlohmann::json header;
  header["version"] = kCheckpointVersion;
  header["dtype"] = detail::dtype_name<S>();
  header["step"] = step;
  header["config"] = config_to_json(params.config);
  header["config"]["train_mode"] = train_mode;
  header["config"]["attn_mode"] = mask_mode_name(attn_mode);
  header["vocab_words"] = vocab_words;

  std::string blob;
  nlohmann::json dir = nlohmann::json::array();
  std::uint64_t offset = 0;
  params.visit([&](const std::string& name, const Tensor<S>& t) {
    dir.push_back({{"name", name}, {"shape", detail::shape_json(t.shape)}, {"offset", offset}});
    detail::append_le(blob, t);
    offset += (std::uint64_t)t.numel() * sizeof(S);
  });
  header["arrays"] = dir;

  if (opt) {
    nlohmann::json odir = nlohmann::json::array();
    auto dump_moments = [&](const char* prefix, const std::vector<Tensor<S>>& ms) {
      std::size_t i = 0;
      params.visit([&](const std::string& name, const Tensor<S>&) {
        const Tensor<S>& m = ms.at(i++);
        odir.push_back({{"name", std::string(prefix) + name},
                        {"shape", detail::shape_json(m.shape)},
                        {"offset", offset}});
        detail::append_le(blob, m);
        offset += (std::uint64_t)m.numel() * sizeof(S);
      });
    };
    dump_moments("m1.", opt->m1);
    dump_moments("m2.", opt->m2);
    header["optimizer"] = {{"step", opt->step}, {"arrays", odir}};
  }

  std::string htext = header.dump();
  std::uint64_t hlen = htext.size();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  char lenbuf[8];
  for (int b = 0; b < 8; ++b) lenbuf[b] = (char)((hlen >> (8 * b)) & 0xff);
  f.write(lenbuf, 8);
  f.write(htext.data(), (std::streamsize)htext.size());
  f.write(blob.data(), (std::streamsize)blob.size());
  if (!f) throw std::runtime_error("write failed for " + path);
}

/// Header JSON without touching the arrays.
inline nlohmann::json peek_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw UsageError("cannot open checkpoint " + path);
  char lenbuf[8];
  f.read(lenbuf, 8);
  if (f.gcount() != 8) throw UsageError("checkpoint " + path + ": truncated length prefix");
  std::uint64_t hlen = 0;
  for (int b = 0; b < 8; ++b) hlen |= (std::uint64_t)(std::uint8_t)lenbuf[b] << (8 * b);
  if (hlen > (1ull << 30)) throw UsageError("checkpoint " + path + ": implausible header length");
  std::string htext(hlen, '\0');
  f.read(htext.data(), (std::streamsize)hlen);
  if ((std::uint64_t)f.gcount() != hlen)
    throw UsageError("checkpoint " + path + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(htext);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("checkpoint " + path + ": header is not valid JSON: " + e.what());
  }
  return header;
}

template <typename S>
LoadedCheckpoint<S> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw UsageError("cannot open checkpoint " + path);
  std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (raw.size() < 8) throw UsageError("checkpoint " + path + ": truncated length prefix");
  std::uint64_t hlen = 0;
  for (int b = 0; b < 8; ++b) hlen |= (std::uint64_t)(std::uint8_t)raw[(std::size_t)b] << (8 * b);
  if (8 + hlen > raw.size()) throw UsageError("checkpoint " + path + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(raw.substr(8, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("checkpoint " + path + ": header is not valid JSON: " + e.what());
  }
  if (header.at("version").get<int>() != kCheckpointVersion)
    throw UsageError("checkpoint " + path + ": version " +
                     std::to_string(header.at("version").get<int>()) + ", expected " +
                     std::to_string(kCheckpointVersion));
  std::string dtype = header.at("dtype").get<std::string>();
  if (dtype != detail::dtype_name<S>())
    throw UsageError("checkpoint " + path + ": dtype " + dtype + ", expected " +
                     detail::dtype_name<S>());

  LoadedCheckpoint<S> out;
  out.params.config = config_from_json(header.at("config"));
  out.train_mode = header.at("config").value("train_mode", std::string("diffusion"));
  out.attn_mode = mask_mode_from_name(header.at("config").value("attn_mode", std::string("cam")));
  out.step = header.at("step").get<std::int64_t>();
  out.vocab_words = header.at("vocab_words").get<std::vector<std::string>>();

  const std::string data = raw.substr(8 + hlen);
  auto fetch = [&](const nlohmann::json& entry, const std::string& want_name,
                   const Shape* want_shape) {
    std::string name = entry.at("name").get<std::string>();
    if (name != want_name)
      throw UsageError("checkpoint " + path + ": array \"" + name + "\" where \"" + want_name +
                       "\" expected");
    Shape sh = detail::shape_from_json(entry.at("shape"));
    if (want_shape && sh != *want_shape)
      throw UsageError("checkpoint " + path + ": array \"" + name + "\" shape " + shape_str(sh) +
                       ", expected " + shape_str(*want_shape));
    Tensor<S> t(sh);
    std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
    std::uint64_t bytes = (std::uint64_t)t.numel() * sizeof(S);
    if (offset + bytes > data.size())
      throw UsageError("checkpoint " + path + ": array \"" + name +
                       "\" offset past end of file");
    detail::read_le(data, offset, t);
    return t;
  };

  // Materialize parameters at their config shapes, then overwrite from the
  // directory, enforcing order, names and shapes.
  {
    Rng scratch(0);
    out.params = DenoiserParams<S>::init(out.params.config, scratch);
  }
  const nlohmann::json& dir = header.at("arrays");
  std::size_t idx = 0;
  out.params.visit([&](const std::string& name, Tensor<S>& t) {
    if (idx >= dir.size())
      throw UsageError("checkpoint " + path + ": array directory missing \"" + name + "\"");
    t = fetch(dir[idx++], name, &t.shape);
  });
  if (idx != dir.size())
    throw UsageError("checkpoint " + path + ": " + std::to_string(dir.size() - idx) +
                     " unexpected extra arrays");

  if (header.contains("optimizer")) {
    out.has_optimizer = true;
    const nlohmann::json& oj = header.at("optimizer");
    out.optimizer.step = oj.at("step").get<std::int64_t>();
    const nlohmann::json& odir = oj.at("arrays");
    std::size_t oi = 0;
    auto pull_moments = [&](const char* prefix, std::vector<Tensor<S>>& ms) {
      out.params.visit([&](const std::string& name, Tensor<S>& t) {
        if (oi >= odir.size())
          throw UsageError("checkpoint " + path + ": optimizer directory missing \"" +
                           std::string(prefix) + name + "\"");
        ms.push_back(fetch(odir[oi++], std::string(prefix) + name, &t.shape));
      });
    };
    pull_moments("m1.", out.optimizer.m1);
    pull_moments("m2.", out.optimizer.m2);
  }
  return out;
}

}  // namespace diffcap
