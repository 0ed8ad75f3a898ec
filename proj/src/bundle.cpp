#include "srlora/bundle.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "srlora/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "payload format is little-endian");

namespace srlora {

namespace fs = std::filesystem;
using nlohmann::json;

std::size_t TensorEntry::numel() const {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

const TensorEntry* WeightBundle::find(std::optional<int> layer,
                                      const std::string& role) const {
  for (const TensorEntry& t : tensors) {
    if (t.layer == layer && t.role == role) return &t;
  }
  return nullptr;
}

TensorEntry* WeightBundle::find(std::optional<int> layer,
                                const std::string& role) {
  return const_cast<TensorEntry*>(
      static_cast<const WeightBundle*>(this)->find(layer, role));
}

long long WeightBundle::backbone_total() const {
  long long total = 0;
  for (const TensorEntry& t : tensors) {
    if (!is_adapter_role(t.role)) total += static_cast<long long>(t.numel());
  }
  return total;
}

bool is_adapter_role(const std::string& role) {
  return role.rfind("lora_", 0) == 0;
}

namespace {

fs::path resolve_manifest(const fs::path& path) {
  if (fs::is_directory(path)) return path / "manifest.json";
  return path;
}

std::vector<char> read_file(const fs::path& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error(ErrorCode::ManifestParse,
                std::string("cannot open ") + what + " " + path.string());
  }
  in.seekg(0, std::ios::end);
  const std::streamoff size = in.tellg();
  in.seekg(0, std::ios::beg);
  std::vector<char> bytes(static_cast<std::size_t>(size));
  in.read(bytes.data(), size);
  if (!in) {
    throw Error(ErrorCode::ManifestParse,
                std::string("short read on ") + what + " " + path.string());
  }
  return bytes;
}

std::optional<int> layer_from_json(const json& j, const std::string& name) {
  if (j.is_null()) return std::nullopt;
  if (!j.is_number_integer()) {
    throw Error(ErrorCode::ManifestParse,
                "tensor " + name + ": layer must be integer or null");
  }
  return j.get<int>();
}

}  // namespace

WeightBundle load_bundle(const fs::path& path) {
  const fs::path manifest_path = resolve_manifest(path);
  const fs::path payload_path = manifest_path.parent_path() / "weights.bin";

  json manifest;
  try {
    manifest = json::parse(read_file(manifest_path, "manifest"));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ManifestParse, e.what());
  }
  if (!manifest.contains("tensors") || !manifest["tensors"].is_array()) {
    throw Error(ErrorCode::ManifestParse, "manifest lacks a tensors array");
  }
  if (!manifest.contains("backbone_total")) {
    throw Error(ErrorCode::ManifestParse, "manifest lacks backbone_total");
  }

  const std::vector<char> payload = read_file(payload_path, "payload");

  WeightBundle bundle;
  if (manifest.contains("meta")) bundle.meta = manifest["meta"];

  std::size_t prev_end = 0;
  bool first = true;
  std::vector<std::pair<std::optional<int>, std::string>> seen;
  for (const json& jt : manifest["tensors"]) {
    TensorEntry entry;
    try {
      entry.name = jt.at("name").get<std::string>();
      entry.role = jt.at("role").get<std::string>();
      entry.layer = layer_from_json(jt.at("layer"), entry.name);
      entry.shape = jt.at("shape").get<std::vector<std::size_t>>();
    } catch (const json::exception& e) {
      throw Error(ErrorCode::ManifestParse,
                  std::string("tensor entry: ") + e.what());
    }
    if (entry.shape.empty() || entry.shape.size() > 2) {
      throw Error(ErrorCode::ManifestParse,
                  "tensor " + entry.name + ": shape must be 1-D or 2-D");
    }
    const std::string dtype = jt.value("dtype", "");
    if (dtype != "f32") {
      throw Error(ErrorCode::UnknownDtype,
                  "tensor " + entry.name + ": dtype '" + dtype + "'");
    }
    const std::size_t offset = jt.at("offset").get<std::size_t>();
    const std::size_t length = jt.at("length").get<std::size_t>();
    if (length != entry.numel() * sizeof(float)) {
      throw Error(ErrorCode::ManifestParse,
                  "tensor " + entry.name + ": length " +
                      std::to_string(length) + " does not match shape");
    }
    if (!first && offset < prev_end) {
      throw Error(ErrorCode::OffsetOverlap,
                  "tensor " + entry.name + ": offset " +
                      std::to_string(offset) + " overlaps previous end " +
                      std::to_string(prev_end));
    }
    if (offset + length > payload.size()) {
      throw Error(ErrorCode::TruncatedPayload,
                  "tensor " + entry.name + ": needs bytes up to " +
                      std::to_string(offset + length) + ", payload has " +
                      std::to_string(payload.size()));
    }
    prev_end = offset + length;
    first = false;

    for (const auto& key : seen) {
      if (key.first == entry.layer && key.second == entry.role) {
        throw Error(ErrorCode::ManifestParse,
                    "tensor " + entry.name + ": duplicate (layer, role)");
      }
    }
    seen.emplace_back(entry.layer, entry.role);

    const std::size_t rows = entry.shape.size() == 2 ? entry.shape[0] : 1;
    const std::size_t cols = entry.shape.size() == 2 ? entry.shape[1]
                                                     : entry.shape[0];
    std::vector<float> narrow(entry.numel());
    std::memcpy(narrow.data(), payload.data() + offset, length);
    std::vector<double> wide(entry.numel());
    for (std::size_t i = 0; i < narrow.size(); ++i) {
      wide[i] = static_cast<double>(narrow[i]);
    }
    try {
      entry.data = Matrix::from_data(rows, cols, std::move(wide));
    } catch (const Error&) {
      throw Error(ErrorCode::NonFiniteTensor,
                  "tensor " + entry.name + ": payload has NaN or Inf");
    }
    bundle.tensors.push_back(std::move(entry));
  }

  const long long declared = manifest["backbone_total"].get<long long>();
  const long long counted = bundle.backbone_total();
  if (declared != counted) {
    throw Error(ErrorCode::ManifestParse,
                "backbone_total declares " + std::to_string(declared) +
                    ", non-adapter tensors count " + std::to_string(counted));
  }
  return bundle;
}

void save_bundle(const WeightBundle& bundle, const fs::path& dir) {
  fs::create_directories(dir);

  json tensors = json::array();
  std::size_t offset = 0;
  std::vector<float> blob;
  for (const TensorEntry& t : bundle.tensors) {
    const std::size_t length = t.numel() * sizeof(float);
    json jt;
    jt["name"] = t.name;
    jt["layer"] = t.layer ? json(*t.layer) : json(nullptr);
    jt["role"] = t.role;
    jt["shape"] = t.shape;
    jt["dtype"] = "f32";
    jt["offset"] = offset;
    jt["length"] = length;
    tensors.push_back(std::move(jt));

    if (t.numel() != t.data.size()) {
      throw Error(ErrorCode::ShapeMismatch,
                  "tensor " + t.name + ": shape does not match data");
    }
    for (double v : t.data.data()) blob.push_back(static_cast<float>(v));
    offset += length;
  }

  json manifest;
  manifest["backbone_total"] = bundle.backbone_total();
  manifest["tensors"] = std::move(tensors);
  if (!bundle.meta.is_null()) manifest["meta"] = bundle.meta;

  std::ofstream mout(dir / "manifest.json", std::ios::binary);
  mout << manifest.dump(2) << "\n";
  if (!mout) {
    throw Error(ErrorCode::ManifestParse,
                "cannot write manifest to " + dir.string());
  }

  std::ofstream bout(dir / "weights.bin", std::ios::binary);
  bout.write(reinterpret_cast<const char*>(blob.data()),
             static_cast<std::streamsize>(blob.size() * sizeof(float)));
  if (!bout) {
    throw Error(ErrorCode::ManifestParse,
                "cannot write payload to " + dir.string());
  }
}

}  // namespace srlora
