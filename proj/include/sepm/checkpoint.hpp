#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sepm/separator.hpp"
#include "sepm/strutil.hpp"

namespace sepm {

// Checkpoint container: magic "SEPM1", a text manifest (config fields, tensor
// table with shapes/dtype/byte offsets, free-form extra section) and a
// little-endian raw blob holding tensor data back to back.

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

namespace detail {

inline const char* dtype_name(float) { return "f32"; }
inline const char* dtype_name(double) { return "f64"; }

struct TensorEntry {
  std::string name;
  std::string dtype;
  Shape shape;
  std::uint64_t offset = 0;
};

}  // namespace detail

// Field table shared by checkpoints and the CLI config file.
struct ConfigField {
  const char* name;
  std::string (*get)(const SeparatorConfig&);
  void (*set)(SeparatorConfig&, const std::string&);
};

#define SEPM_CFG_I64(field)                                                              \
  ConfigField{#field, [](const SeparatorConfig& c) { return std::to_string(c.field); }, \
              [](SeparatorConfig& c, const std::string& v) { c.field = parse_i64(v, #field); }}
#define SEPM_CFG_BOOL(field)                                                                      \
  ConfigField{#field,                                                                             \
              [](const SeparatorConfig& c) { return std::string(c.field ? "true" : "false"); },   \
              [](SeparatorConfig& c, const std::string& v) { c.field = parse_bool(v, #field); }}

inline const std::vector<ConfigField>& separator_config_fields() {
  static const std::vector<ConfigField> fields = {
      SEPM_CFG_I64(n_stages),     SEPM_CFG_I64(base_dim), SEPM_CFG_I64(blocks_per_stage),
      SEPM_CFG_I64(kernel_size),  SEPM_CFG_I64(stride),   SEPM_CFG_I64(n_sources),
      SEPM_CFG_BOOL(causal),      SEPM_CFG_I64(sample_rate),
      SEPM_CFG_I64(expand),       SEPM_CFG_I64(n_state),  SEPM_CFG_I64(d_conv),
      SEPM_CFG_I64(dt_rank),      SEPM_CFG_BOOL(rmsnorm), SEPM_CFG_BOOL(recombine_per_block),
      SEPM_CFG_BOOL(use_d_term),
  };
  return fields;
}

#undef SEPM_CFG_I64
#undef SEPM_CFG_BOOL

template <typename T>
void save_checkpoint(const std::string& path, const SeparatorConfig& cfg,
                     const NamedParams<T>& params,
                     const std::vector<std::pair<std::string, Array<T>>>& extra_tensors = {},
                     const std::vector<std::pair<std::string, std::string>>& extra_kv = {}) {
  std::ostringstream manifest;
  manifest << "[config]\n";
  for (const auto& f : separator_config_fields()) manifest << f.name << " = " << f.get(cfg) << "\n";
  manifest << "[tensors]\n";
  std::uint64_t offset = 0;
  auto emit_entry = [&](const std::string& name, const Shape& shape, std::int64_t numel) {
    manifest << name << " " << detail::dtype_name(T{}) << " " << shape.size();
    for (auto d : shape) manifest << " " << d;
    manifest << " " << offset << "\n";
    offset += static_cast<std::uint64_t>(numel) * sizeof(T);
  };
  for (const auto& [name, t] : params) emit_entry(name, t.shape(), t.numel());
  for (const auto& [name, a] : extra_tensors) emit_entry(name, a.shape, a.numel());
  if (!extra_kv.empty()) {
    manifest << "[extra]\n";
    for (const auto& [k, v] : extra_kv) manifest << k << " = " << v << "\n";
  }
  const std::string mtext = manifest.str();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path);
  out << "SEPM1\n";
  out << "manifest_bytes " << mtext.size() << "\n";
  out.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
  for (const auto& [name, t] : params)
    out.write(reinterpret_cast<const char*>(t.values().data()),
              static_cast<std::streamsize>(t.values().size() * sizeof(T)));
  for (const auto& [name, a] : extra_tensors)
    out.write(reinterpret_cast<const char*>(a.data.data()),
              static_cast<std::streamsize>(a.data.size() * sizeof(T)));
  if (!out) throw DataError("write failed for checkpoint: " + path);
}

template <typename T>
struct LoadedCheckpoint {
  SeparatorConfig cfg;
  std::unordered_map<std::string, Array<T>> tensors;
  std::vector<std::pair<std::string, std::string>> extra;
  std::string stored_dtype;

  const Array<T>& require(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw DataError("checkpoint is missing tensor '" + name + "'");
    return it->second;
  }
  std::string extra_value(const std::string& key, const std::string& fallback = "") const {
    for (const auto& [k, v] : extra)
      if (k == key) return v;
    return fallback;
  }
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  std::string magic, tag;
  std::getline(in, magic);
  if (magic != "SEPM1") throw DataError("not a SEPM1 checkpoint: " + path);
  std::uint64_t mbytes = 0;
  in >> tag >> mbytes;
  if (tag != "manifest_bytes" || !in) throw DataError("corrupt checkpoint header: " + path);
  in.get();  // newline
  std::string mtext(mbytes, '\0');
  in.read(mtext.data(), static_cast<std::streamsize>(mbytes));
  if (!in) throw DataError("corrupt checkpoint manifest: " + path);
  const std::streampos blob_start = in.tellg();

  LoadedCheckpoint<T> ck;
  std::vector<detail::TensorEntry> entries;
  std::istringstream ms(mtext);
  std::string line, section;
  while (std::getline(ms, line)) {
    if (line.empty()) continue;
    if (line.front() == '[') {
      section = line;
      continue;
    }
    if (section == "[config]" || section == "[extra]") {
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw DataError("corrupt manifest line: " + line);
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t");
        const auto e = s.find_last_not_of(" \t");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      const std::string key = trim(line.substr(0, eq));
      const std::string val = trim(line.substr(eq + 1));
      if (section == "[config]") {
        bool found = false;
        for (const auto& f : separator_config_fields())
          if (key == f.name) {
            f.set(ck.cfg, val);
            found = true;
            break;
          }
        if (!found) throw DataError("unknown config field in checkpoint: " + key);
      } else {
        ck.extra.emplace_back(key, val);
      }
    } else if (section == "[tensors]") {
      std::istringstream ls(line);
      detail::TensorEntry e;
      std::size_t ndim = 0;
      ls >> e.name >> e.dtype >> ndim;
      e.shape.resize(ndim);
      for (auto& d : e.shape) ls >> d;
      ls >> e.offset;
      if (!ls) throw DataError("corrupt tensor entry: " + line);
      entries.push_back(std::move(e));
    } else {
      throw DataError("unexpected manifest content: " + line);
    }
  }

  for (const auto& e : entries) {
    if (!ck.stored_dtype.empty() && ck.stored_dtype != e.dtype)
      throw DataError("mixed dtypes in checkpoint");
    ck.stored_dtype = e.dtype;
    const std::int64_t numel = shape_numel(e.shape);
    Array<T> a(e.shape);
    in.seekg(blob_start + static_cast<std::streamoff>(e.offset));
    if (e.dtype == detail::dtype_name(T{})) {
      in.read(reinterpret_cast<char*>(a.data.data()),
              static_cast<std::streamsize>(numel * sizeof(T)));
    } else if (e.dtype == "f32") {
      std::vector<float> tmp(static_cast<std::size_t>(numel));
      in.read(reinterpret_cast<char*>(tmp.data()),
              static_cast<std::streamsize>(numel * sizeof(float)));
      for (std::int64_t i = 0; i < numel; ++i) a.data[i] = static_cast<T>(tmp[i]);
    } else if (e.dtype == "f64") {
      std::vector<double> tmp(static_cast<std::size_t>(numel));
      in.read(reinterpret_cast<char*>(tmp.data()),
              static_cast<std::streamsize>(numel * sizeof(double)));
      for (std::int64_t i = 0; i < numel; ++i) a.data[i] = static_cast<T>(tmp[i]);
    } else {
      throw DataError("unknown dtype in checkpoint: " + e.dtype);
    }
    if (!in) throw DataError("checkpoint blob truncated: " + path);
    ck.tensors.emplace(e.name, std::move(a));
  }
  return ck;
}

// Rebuilds a model and fills every registered parameter from the checkpoint.
template <typename T>
SeparatorWeights<T> load_separator(const LoadedCheckpoint<T>& ck, bool requires_grad = true) {
  SeparatorWeights<T> w = build_separator<T>(ck.cfg, 0, requires_grad);
  for (auto& [name, t] : w.params) {
    const Array<T>& src = ck.require(name);
    if (src.shape != t.shape())
      throw DataError("checkpoint tensor '" + name + "' has shape " + shape_str(src.shape) +
                      ", expected " + shape_str(t.shape()));
    t.values_mut() = src.data;
  }
  return w;
}

template <typename T>
SeparatorWeights<T> load_separator(const std::string& path, bool requires_grad = true) {
  return load_separator<T>(load_checkpoint<T>(path), requires_grad);
}

}  // namespace sepm
