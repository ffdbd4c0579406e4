#include "moe/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <nlohmann/json.hpp>

#include "moe/error.hpp"

namespace moe {
namespace {

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint IO assumes a little-endian host");

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
  }
}

template <typename T>
T get_le(const std::uint8_t* p) {
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(p[i]) << (8 * i);
  return value;
}

json config_to_json(const ModelConfig& c) {
  return json{{"n_layers", c.n_layers},   {"d_model", c.d_model},
              {"n_heads", c.n_heads},     {"d_ffn", c.d_ffn},
              {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_ffn = j.at("d_ffn").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  return c;
}

}  // namespace

std::string checkpoint_kind(const Checkpoint& model) {
  auto it = model.metadata.find("kind");
  return it == model.metadata.end() ? "dense" : it->second;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& model) {
  json entries = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : model.tensors) {
    const std::uint64_t len = t.size() * sizeof(float);
    entries.push_back({{"name", name},
                       {"dtype", "f32"},
                       {"shape", t.shape()},
                       {"byte_offset", offset},
                       {"byte_len", len}});
    offset += len;
  }
  json meta = json::object();
  for (const auto& [k, v] : model.metadata) meta[k] = v;
  const json header{
      {"config", config_to_json(model.config)}, {"metadata", meta}, {"tensors", entries}};
  const std::string text = header.dump();

  std::vector<std::uint8_t> out;
  out.reserve(16 + text.size() + offset);
  out.insert(out.end(), std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& [name, t] : model.tensors) {
    const auto* bytes = reinterpret_cast<const std::uint8_t*>(t.data().data());
    out.insert(out.end(), bytes, bytes + t.size() * sizeof(float));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  require(bytes.size() >= 4, ErrorKind::Truncated, "checkpoint shorter than its magic");
  require(std::memcmp(bytes.data(), kCheckpointMagic, 4) == 0, ErrorKind::BadMagic,
          "not a MOEF checkpoint (bad magic)");
  require(bytes.size() >= 16, ErrorKind::Truncated, "checkpoint header prefix is truncated");
  const auto version = get_le<std::uint32_t>(bytes.data() + 4);
  require(version == kCheckpointVersion, ErrorKind::VersionMismatch,
          "unsupported checkpoint version " + std::to_string(version));
  const auto header_len = get_le<std::uint64_t>(bytes.data() + 8);
  require(header_len <= bytes.size() - 16, ErrorKind::Truncated,
          "checkpoint header is truncated");
  const std::size_t payload_start = 16 + static_cast<std::size_t>(header_len);

  json header;
  try {
    header = json::parse(bytes.begin() + 16,
                         bytes.begin() + static_cast<std::ptrdiff_t>(payload_start));
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, std::string("checkpoint header is not valid JSON: ") + e.what());
  }

  Checkpoint model;
  std::size_t payload_end = payload_start;
  try {
    model.config = config_from_json(header.at("config"));
    for (const auto& [k, v] : header.at("metadata").items()) {
      model.metadata[k] = v.get<std::string>();
    }
    std::string previous;
    for (const auto& entry : header.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      require(entry.at("dtype").get<std::string>() == "f32", ErrorKind::Format,
              "tensor '" + name + "' has unsupported dtype");
      require(previous.empty() || previous < name, ErrorKind::Format,
              "tensor entries are not sorted by name at '" + name + "'");
      previous = name;
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("byte_offset").get<std::uint64_t>();
      const auto len = entry.at("byte_len").get<std::uint64_t>();
      require(!shape.empty() && len == element_count(shape) * sizeof(float), ErrorKind::Format,
              "tensor '" + name + "' byte_len does not match its shape");
      require(offset + len <= bytes.size() - payload_start, ErrorKind::Truncated,
              "payload for tensor '" + name + "' is truncated");
      std::vector<float> data(element_count(shape));
      std::memcpy(data.data(), bytes.data() + payload_start + offset, len);
      model.tensors.emplace(name, Tensor(shape, std::move(data)));
      payload_end = std::max<std::size_t>(payload_end, payload_start + offset + len);
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, std::string("malformed checkpoint header: ") + e.what());
  }
  require(payload_end == bytes.size(), ErrorKind::Format,
          "checkpoint has trailing bytes after the payload");
  return model;
}

void save_checkpoint(const Checkpoint& model, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorKind::Io, "failed writing '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  Checkpoint model = decode_checkpoint(bytes);
  if (checkpoint_kind(model) == "dense") {
    model.config.validate();
    validate_schema(model_schema(model.config), model.tensors);
  }
  return model;
}

}  // namespace moe
