#include "robustit/io.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace rit {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr char kCheckpointMagic[8] = {'R', 'I', 'T', 'C', 'K', 'P', 'T', '1'};

void ensure_parent(const std::string& path) {
  auto parent = fs::path(path).parent_path();
  if (parent.empty()) return;
  std::error_code ec;
  fs::create_directories(parent, ec);
  if (ec) throw IoError("cannot create directory '" + parent.string() + "': " + ec.message());
}

void write_bytes(const std::string& path, const std::string& bytes) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void append_doubles(std::string& out, const double* p, std::size_t n) {
  out.append(reinterpret_cast<const char*>(p), n * sizeof(double));
}

std::size_t record_len(const ModelConfig& mc) {
  return static_cast<std::size_t>(mc.H * mc.W * mc.C + mc.L_instr + mc.L_resp + 1);
}

}  // namespace

std::uint32_t crc32_bytes(const void* data, std::size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  const auto* p = static_cast<const Bytef*>(data);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = crc32(c, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

std::uint32_t crc32_file(const std::string& path) {
  const auto b = read_bytes(path);
  return crc32_bytes(b.data(), b.size());
}

void write_text(const std::string& path, const std::string& text) { write_bytes(path, text); }
std::string read_text(const std::string& path) { return read_bytes(path); }

bool dataset_exists(const std::string& stem) { return fs::exists(stem + ".json") && fs::exists(stem + ".bin"); }

void save_dataset(const std::string& stem, const std::vector<Sample>& samples, const ModelConfig& mc,
                  json manifest_extra) {
  const std::size_t img = static_cast<std::size_t>(mc.H * mc.W * mc.C);
  std::string blob;
  blob.reserve(samples.size() * record_len(mc) * sizeof(double));
  std::vector<double> tail;
  for (const auto& s : samples) {
    if (s.image.size() != img || s.instruction.size() != static_cast<std::size_t>(mc.L_instr) ||
        s.response.size() != static_cast<std::size_t>(mc.L_resp))
      throw IoError("save_dataset: sample does not match the configured shapes");
    append_doubles(blob, s.image.data(), img);
    tail.clear();
    for (int t : s.instruction) tail.push_back(t);
    for (int t : s.response) tail.push_back(t);
    tail.push_back(s.is_poisoned ? 1.0 : 0.0);
    append_doubles(blob, tail.data(), tail.size());
  }
  const std::string bin = stem + ".bin";
  write_bytes(bin, blob);
  json m = std::move(manifest_extra);
  m["schema_version"] = kSchemaVersion;
  m["count"] = samples.size();
  m["record"] = {{"image", {mc.H, mc.W, mc.C}}, {"instruction", mc.L_instr}, {"response", mc.L_resp}, {"dtype", "float64-le"}};
  m["blob"] = fs::path(bin).filename().string();
  m["blob_bytes"] = blob.size();
  m["blob_crc32"] = crc32_bytes(blob.data(), blob.size());
  write_bytes(stem + ".json", m.dump(2) + "\n");
}

DatasetFile load_dataset(const std::string& stem, const ModelConfig& mc) {
  DatasetFile f;
  const std::string mpath = stem + ".json", bpath = stem + ".bin";
  try {
    f.manifest = json::parse(read_bytes(mpath));
  } catch (const json::parse_error& e) {
    throw IoError("manifest '" + mpath + "' is not valid JSON: " + e.what());
  }
  const auto blob = read_bytes(bpath);
  const auto crc = crc32_bytes(blob.data(), blob.size());
  if (f.manifest.value("blob_crc32", 0u) != crc || f.manifest.value("blob_bytes", std::size_t{0}) != blob.size())
    throw IoError("checksum mismatch for '" + bpath + "' (manifest " + mpath + ")");
  const json expect = {mc.H, mc.W, mc.C};
  if (f.manifest["record"]["image"] != expect || f.manifest["record"]["instruction"] != mc.L_instr ||
      f.manifest["record"]["response"] != mc.L_resp)
    throw IoError("dataset '" + stem + "' was written for different model shapes");
  const std::size_t rl = record_len(mc), n = f.manifest["count"].get<std::size_t>();
  if (blob.size() != n * rl * sizeof(double)) throw IoError("dataset '" + bpath + "' has an unexpected size");
  const std::size_t img = static_cast<std::size_t>(mc.H * mc.W * mc.C);
  std::vector<double> rec(rl);
  f.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::memcpy(rec.data(), blob.data() + i * rl * sizeof(double), rl * sizeof(double));
    auto& s = f.samples[i];
    s.image.assign(rec.begin(), rec.begin() + static_cast<std::ptrdiff_t>(img));
    std::size_t o = img;
    for (int j = 0; j < mc.L_instr; ++j) s.instruction.push_back(static_cast<int>(rec[o++]));
    for (int j = 0; j < mc.L_resp; ++j) s.response.push_back(static_cast<int>(rec[o++]));
    s.is_poisoned = rec[o] != 0.0;
  }
  return f;
}

void save_checkpoint(const std::string& path, const Model& model, const ImportanceState* importance,
                     const std::vector<double>* mask) {
  json h;
  h["schema_version"] = kSchemaVersion;
  h["model"] = to_json(model.config());
  h["frozen_seed"] = model.config().frozen_seed;
  h["frozen_checksum"] = model.frozen_checksum();
  json tensors = json::array();
  std::string payload;
  const auto params = model.params().list();
  const auto& names = TrainableParams::names();
  for (std::size_t i = 0; i < params.size(); ++i) {
    tensors.push_back({{"name", names[i]}, {"shape", params[i]->shape()}, {"offset", payload.size()}});
    append_doubles(payload, params[i]->data().data(), params[i]->numel());
  }
  h["tensors"] = tensors;
  if (importance)
    h["importance"] = {{"g", importance->g}, {"beta", importance->beta}, {"gamma", importance->gamma}, {"step", importance->step}};
  if (mask) h["mask"] = *mask;
  h["payload_crc32"] = crc32_bytes(payload.data(), payload.size());
  const std::string head = h.dump();
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  const std::uint64_t len = head.size();
  out.append(reinterpret_cast<const char*>(&len), sizeof len);
  out += head;
  out += payload;
  write_bytes(path, out);
}

Checkpoint load_checkpoint(const std::string& path) {
  const auto b = read_bytes(path);
  if (b.size() < 16 || std::memcmp(b.data(), kCheckpointMagic, 8) != 0) throw IoError("'" + path + "' is not a checkpoint");
  std::uint64_t len = 0;
  std::memcpy(&len, b.data() + 8, sizeof len);
  if (16 + len > b.size()) throw IoError("checkpoint '" + path + "' is truncated");
  Checkpoint ck;
  ck.header = json::parse(b.substr(16, len));
  const std::string payload = b.substr(16 + len);
  if (ck.header["payload_crc32"].get<std::uint32_t>() != crc32_bytes(payload.data(), payload.size()))
    throw IoError("checkpoint '" + path + "' payload checksum mismatch");
  for (const auto& t : ck.header["tensors"]) {
    std::size_t n = 1;
    for (auto d : t["shape"]) n *= d.get<std::size_t>();
    const auto off = t["offset"].get<std::size_t>();
    if (off + n * sizeof(double) > payload.size()) throw IoError("checkpoint '" + path + "' tensor out of range");
    std::vector<double> v(n);
    std::memcpy(v.data(), payload.data() + off, n * sizeof(double));
    ck.tensors.push_back(std::move(v));
  }
  return ck;
}

void restore_params(const Checkpoint& ck, Model& model) {
  auto params = model.params().list();
  if (ck.tensors.size() != params.size()) throw IoError("checkpoint tensor count does not match the model");
  if (ck.header["frozen_checksum"].get<std::uint32_t>() != model.frozen_checksum())
    throw IoError("checkpoint was written for a different frozen encoder/core");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (ck.tensors[i].size() != params[i]->numel()) throw IoError("checkpoint tensor '" + TrainableParams::names()[i] + "' has the wrong size");
    params[i]->mutable_data() = ck.tensors[i];
  }
}

}  // namespace rit
