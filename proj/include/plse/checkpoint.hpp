#pragma once

// Checkpoint container.
//
//   offset 0   8 bytes   magic "PLSECKP1"
//   offset 8   8 bytes   manifest length M, unsigned little-endian
//   offset 16  M bytes   JSON manifest (UTF-8)
//   then                 payload: float32 little-endian arrays, row-major,
//                        concatenated in manifest order
//
// The manifest has {format, dtype, tensors: [{name, rows, cols, offset,
// sha256}], ...} plus caller-supplied fields (config, step, seed, history).
// Offsets are in bytes from the start of the payload; sha256 covers the
// tensor's payload bytes.

#include <json.hpp>

#include <bit>
#include <cstring>
#include <map>

#include "plse/encoder.hpp"

namespace plse {

inline constexpr char kCheckpointMagic[8] = {'P', 'L', 'S', 'E', 'C', 'K', 'P', '1'};

struct StoredTensor {
  Eigen::Index rows = 0, cols = 0;
  std::vector<float> values;
};

struct Checkpoint {
  nlohmann::json manifest = nlohmann::json::object();
  std::map<std::string, StoredTensor> tensors;
  std::vector<std::string> order;

  void put(const std::string& name, Eigen::Index rows, Eigen::Index cols, std::vector<float> values) {
    if (static_cast<Eigen::Index>(values.size()) != rows * cols) throw Error("checkpoint: size mismatch for " + name);
    if (!tensors.count(name)) order.push_back(name);
    tensors[name] = {rows, cols, std::move(values)};
  }

  template <class S>
  void put_all(const std::vector<TensorRef<S>>& refs, const std::string& prefix = "") {
    for (const auto& t : refs) {
      std::vector<float> v(static_cast<std::size_t>(t.size()));
      for (Eigen::Index i = 0; i < t.size(); ++i) v[static_cast<std::size_t>(i)] = static_cast<float>(t.data[i]);
      put(prefix + t.name, t.rows, t.cols, std::move(v));
    }
  }

  bool has(const std::string& name) const { return tensors.count(name) > 0; }

  const StoredTensor& get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw Error("checkpoint: missing tensor " + name);
    return it->second;
  }

  /// Copies stored values into every ref; shapes must match exactly.
  template <class S>
  void load_into(const std::vector<TensorRef<S>>& refs, const std::string& prefix = "") const {
    for (const auto& t : refs) {
      const auto& st = get(prefix + t.name);
      if (st.rows != t.rows || st.cols != t.cols)
        throw Error("checkpoint: shape mismatch for " + t.name + " (stored " + std::to_string(st.rows) + "x" + std::to_string(st.cols) +
                    ", expected " + std::to_string(t.rows) + "x" + std::to_string(t.cols) + ")");
      for (Eigen::Index i = 0; i < t.size(); ++i) t.data[i] = static_cast<S>(st.values[static_cast<std::size_t>(i)]);
    }
  }
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + static_cast<std::size_t>(i)])) << (8 * i);
  return v;
}

inline std::string float_bytes(const std::vector<float>& v) {
  std::string out(v.size() * 4, '\0');
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint32_t u;
    std::memcpy(&u, &v[i], 4);
    for (int b = 0; b < 4; ++b) out[4 * i + static_cast<std::size_t>(b)] = static_cast<char>((u >> (8 * b)) & 0xff);
  }
  return out;
}

inline std::vector<float> bytes_float(std::string_view s) {
  std::vector<float> v(s.size() / 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[4 * i + static_cast<std::size_t>(b)])) << (8 * b);
    std::memcpy(&v[i], &u, 4);
  }
  return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  nlohmann::json man = ck.manifest;
  man["format"] = 1;
  man["dtype"] = "f32";
  nlohmann::json list = nlohmann::json::array();
  std::string payload;
  for (const auto& name : ck.order) {
    const auto& t = ck.tensors.at(name);
    const auto bytes = detail::float_bytes(t.values);
    list.push_back({{"name", name}, {"rows", t.rows}, {"cols", t.cols}, {"offset", payload.size()}, {"sha256", sha256_hex(bytes)}});
    payload += bytes;
  }
  man["tensors"] = list;
  const std::string mtext = man.dump(1);
  std::string out(kCheckpointMagic, 8);
  detail::put_u64(out, mtext.size());
  out += mtext;
  out += payload;
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes, const std::string& where = "<checkpoint>") {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) throw Error(where + ": not a checkpoint file");
  const std::uint64_t mlen = detail::get_u64(bytes, 8);
  if (16 + mlen > bytes.size()) throw Error(where + ": truncated manifest");
  Checkpoint ck;
  ck.manifest = nlohmann::json::parse(bytes.substr(16, mlen));
  const std::size_t base = 16 + mlen;
  for (const auto& t : ck.manifest.at("tensors")) {
    const auto rows = t.at("rows").get<Eigen::Index>(), cols = t.at("cols").get<Eigen::Index>();
    const auto off = t.at("offset").get<std::size_t>();
    const auto n = static_cast<std::size_t>(rows * cols) * 4;
    if (base + off + n > bytes.size()) throw Error(where + ": truncated payload for " + t.at("name").get<std::string>());
    const std::string_view raw(bytes.data() + base + off, n);
    if (sha256_hex(raw) != t.at("sha256").get<std::string>()) throw Error(where + ": hash mismatch for " + t.at("name").get<std::string>());
    ck.put(t.at("name").get<std::string>(), rows, cols, detail::bytes_float(raw));
  }
  ck.manifest.erase("tensors");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& p, const Checkpoint& ck) { write_file(p, serialize_checkpoint(ck)); }
inline Checkpoint load_checkpoint(const std::filesystem::path& p) { return parse_checkpoint(read_file(p), p.string()); }

inline nlohmann::json to_json(const EncoderConfig& c) {
  return {{"d_model", c.d_model}, {"n_layers", c.n_layers}, {"n_heads", c.n_heads}, {"d_ff", c.d_ff},
          {"max_len", c.max_len}, {"vocab_size", c.vocab_size}, {"dropout_p", c.dropout_p}, {"seed", c.seed}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.max_len = j.at("max_len").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.dropout_p = j.at("dropout_p").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace plse
