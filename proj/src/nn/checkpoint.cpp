#include "efl/nn/checkpoint.hpp"

#include "efl/error.hpp"
#include "efl/io.hpp"

#include <cstring>

namespace efl::nn {

namespace {

constexpr char kMagic[8] = {'E', 'F', 'L', 'C', 'K', 'P', 'T', '\0'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(std::string_view bytes, std::size_t& pos) {
  EFL_CHECK(pos + sizeof(T) <= bytes.size(), Errc::io, "checkpoint truncated");
  T v;
  std::memcpy(&v, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

std::string encode_checkpoint(const std::string& kind, const nlohmann::json& config, const ParamList& params) {
  nlohmann::json header;
  header["format_version"] = kCheckpointFormatVersion;
  header["kind"] = kind;
  header["config"] = config;
  header["params"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& p : params) {
    const auto& t = p.var.value();
    header["params"].push_back({{"name", p.name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.size()}});
    offset += t.size();
  }
  const std::string text = header.dump();
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointFormatVersion);
  put<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& p : params) {
    const auto& data = p.var.value().storage();
    out.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(double));
  }
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  EFL_CHECK(bytes.size() >= sizeof(kMagic) && std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) == 0, Errc::io,
            "not a checkpoint (bad magic)");
  std::size_t pos = sizeof(kMagic);
  Checkpoint ckpt;
  ckpt.format_version = static_cast<int>(get<std::uint32_t>(bytes, pos));
  EFL_CHECK(ckpt.format_version == kCheckpointFormatVersion, Errc::io,
            "unsupported checkpoint format version " + std::to_string(ckpt.format_version));
  const auto header_len = get<std::uint64_t>(bytes, pos);
  EFL_CHECK(pos + header_len <= bytes.size(), Errc::io, "checkpoint header truncated");
  const auto header = nlohmann::json::parse(bytes.substr(pos, header_len));
  pos += header_len;
  ckpt.kind = header.at("kind").get<std::string>();
  ckpt.config = header.at("config");
  for (const auto& entry : header.at("params")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<int>>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto count = entry.at("count").get<std::size_t>();
    const std::size_t start = pos + offset * sizeof(double);
    EFL_CHECK(start + count * sizeof(double) <= bytes.size(), Errc::io, "checkpoint payload truncated at " + name);
    std::vector<double> data(count);
    std::memcpy(data.data(), bytes.data() + start, count * sizeof(double));
    ckpt.tensors.emplace(name, Tensor(shape, std::move(data)));
    ckpt.order.push_back(name);
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const std::string& kind, const nlohmann::json& config,
                     const ParamList& params) {
  io::write_file_atomic(path, encode_checkpoint(kind, config, params));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(io::read_file(path)); }

void restore_params(const Checkpoint& ckpt, const ParamList& params, const std::string& prefix) {
  for (const auto& p : params) {
    const auto it = ckpt.tensors.find(prefix + p.name);
    EFL_CHECK(it != ckpt.tensors.end(), Errc::io, "checkpoint is missing parameter " + prefix + p.name);
    EFL_CHECK(it->second.same_shape(p.var.value()), Errc::shape_mismatch,
              "checkpoint shape mismatch for " + p.name + ": " + it->second.shape_str() + " vs " +
                  p.var.value().shape_str());
    Var v = p.var;
    v.mutable_value() = it->second;
  }
}

}  // namespace efl::nn
