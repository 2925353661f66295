#include "dimae/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "dimae/errors.hpp"

namespace dimae::checkpoint {
namespace {

constexpr char kMagic[8] = {'D', 'I', 'M', 'A', 'E', 'C', 'K', 'P'};
static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename V>
void write_pod(std::ostream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::istream& in) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!in) throw IoError("checkpoint truncated");
  return v;
}

}  // namespace

const Tensor* Archive::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

void write_archive(const std::filesystem::path& path, const Archive& archive) {
  nlohmann::json header;
  header["format"] = "dimae-checkpoint";
  header["format_version"] = kFormatVersion;
  header["config"] = archive.config;
  header["meta"] = archive.meta;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : archive.tensors) {
    require(t.values.size() == static_cast<std::size_t>(t.rows * t.cols), "tensor " + t.name + " has a bad size");
    header["tensors"].push_back(
        {{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}, {"dtype", t.is_double ? "f64" : "f32"}, {"offset", offset}});
    offset += t.values.size() * (t.is_double ? 8 : 4);
  }
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
  out.write(kMagic, sizeof(kMagic));
  write_pod<std::uint32_t>(out, kFormatVersion);
  write_pod<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : archive.tensors) {
    if (t.is_double) {
      out.write(reinterpret_cast<const char*>(t.values.data()), static_cast<std::streamsize>(t.values.size() * 8));
    } else {
      std::vector<float> buf(t.values.begin(), t.values.end());
      out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    }
  }
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0) throw IoError("not a checkpoint file: " + path.string());
  const auto version = read_pod<std::uint32_t>(in);
  if (version != kFormatVersion) {
    throw IoError("unsupported checkpoint format version " + std::to_string(version));
  }
  const auto header_len = read_pod<std::uint64_t>(in);
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw IoError("checkpoint header truncated");
  const auto header = nlohmann::json::parse(text);

  Archive archive;
  archive.config = header.value("config", nlohmann::json::object());
  archive.meta = header.value("meta", nlohmann::json::object());
  const auto payload_start = in.tellg();
  for (const auto& entry : header.at("tensors")) {
    Tensor t;
    t.name = entry.at("name").get<std::string>();
    t.rows = entry.at("rows").get<Index>();
    t.cols = entry.at("cols").get<Index>();
    t.is_double = entry.at("dtype").get<std::string>() == "f64";
    const auto count = static_cast<std::size_t>(t.rows * t.cols);
    in.seekg(payload_start + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
    if (t.is_double) {
      t.values.resize(count);
      in.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(count * 8));
    } else {
      std::vector<float> buf(count);
      in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(count * 4));
      t.values.assign(buf.begin(), buf.end());
    }
    if (!in) throw IoError("checkpoint payload truncated at tensor " + t.name);
    archive.tensors.push_back(std::move(t));
  }
  return archive;
}

template <typename T>
Archive model_archive(const model::MaskedAutoencoder<T>& model) {
  Archive a;
  a.config["model"] = model.config();
  const auto& params = model.params();
  for (ParamId id = 0; id < params.size(); ++id) a.tensors.push_back(to_tensor(params.name(id), params.value(id)));
  return a;
}

template <typename T>
model::MaskedAutoencoder<T> load_model(const Archive& archive) {
  require(archive.config.contains("model"), "checkpoint has no model config");
  auto cfg = archive.config.at("model").get<model::ModelConfig>();
  model::MaskedAutoencoder<T> m(cfg, 0);
  auto& params = m.params();
  for (ParamId id = 0; id < params.size(); ++id) {
    const Tensor* t = archive.find(params.name(id));
    if (!t) throw IoError("checkpoint is missing tensor " + params.name(id));
    from_tensor(*t, params.value(id));
  }
  return m;
}

template Archive model_archive<float>(const model::MaskedAutoencoder<float>&);
template Archive model_archive<double>(const model::MaskedAutoencoder<double>&);
template model::MaskedAutoencoder<float> load_model<float>(const Archive&);
template model::MaskedAutoencoder<double> load_model<double>(const Archive&);

}  // namespace dimae::checkpoint
