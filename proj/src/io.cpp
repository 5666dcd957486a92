#include "cmkt/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cmkt/errors.hpp"

namespace cmkt::io {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kFeatureMagic[4] = {'C', 'M', 'K', 'T'};
constexpr char kCheckpointMagic[8] = {'C', 'M', 'K', 'T', 'C', 'K', 'P', 'T'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void put_floats(std::vector<std::uint8_t>& out, const Tensor2D& m) {
  for (double d : m.data()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(d)));
}

void get_floats(const std::uint8_t* p, Tensor2D& m) {
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<double>(std::bit_cast<float>(get_u32(p + 4 * i)));
}

std::vector<std::uint8_t> read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_all(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to '" + path.string() + "'");
}

}  // namespace

std::vector<std::uint8_t> encode_features(const Tensor2D& m) {
  if (!m.all_finite()) throw NumericalError("feature matrix has non-finite values");
  std::vector<std::uint8_t> out(kFeatureMagic, kFeatureMagic + 4);
  put_u32(out, kFeatureVersion);
  put_u32(out, static_cast<std::uint32_t>(m.rows()));
  put_u32(out, static_cast<std::uint32_t>(m.cols()));
  out.reserve(out.size() + 4 * m.size());
  put_floats(out, m);
  return out;
}

Tensor2D decode_features(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 16)
    throw FormatError("feature header truncated at byte offset " + std::to_string(bytes.size()) +
                      " (need 16 header bytes)");
  if (std::memcmp(bytes.data(), kFeatureMagic, 4) != 0) throw FormatError("bad feature magic at byte offset 0");
  const std::uint32_t version = get_u32(bytes.data() + 4);
  if (version != kFeatureVersion)
    throw FormatError("unsupported feature version " + std::to_string(version) + " at byte offset 4");
  const std::uint64_t rows = get_u32(bytes.data() + 8);
  const std::uint64_t cols = get_u32(bytes.data() + 12);
  const std::uint64_t expected = 4 * rows * cols;
  const std::uint64_t actual = bytes.size() - 16;
  if (actual != expected)
    throw FormatError("feature payload at byte offset 16: expected " + std::to_string(expected) + " bytes, found " +
                      std::to_string(actual));
  Tensor2D m(rows, cols);
  get_floats(bytes.data() + 16, m);
  return m;
}

void write_feature_file(const fs::path& path, const Tensor2D& m) { write_all(path, encode_features(m)); }

Tensor2D read_feature_file(const fs::path& path) {
  try {
    return decode_features(read_all(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

Tensor2D round_to_float(const Tensor2D& m) {
  Tensor2D out = m;
  for (double& v : out.data()) v = static_cast<double>(static_cast<float>(v));
  return out;
}

std::vector<ManifestEntry> read_manifest(const fs::path& path, bool check_files) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open manifest '" + path.string() + "'");
  std::vector<ManifestEntry> out;
  std::set<std::string> seen;
  std::string line;
  int lineno = 0;
  const fs::path base = path.parent_path();
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
    if (t2 == std::string::npos)
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected utt_id<TAB>feature_path<TAB>transcript");
    ManifestEntry e{line.substr(0, t1), line.substr(t1 + 1, t2 - t1 - 1), line.substr(t2 + 1)};
    if (e.utt_id.empty()) throw DataError(path.string() + ":" + std::to_string(lineno) + ": empty utt_id");
    if (!seen.insert(e.utt_id).second) throw DataError("duplicate utt_id '" + e.utt_id + "' in " + path.string());
    fs::path fp(e.feature_path);
    if (fp.is_relative()) fp = base / fp;
    e.feature_path = fp.string();
    if (check_files && !fs::exists(fp)) throw DataError("missing feature file '" + e.feature_path + "'");
    out.push_back(std::move(e));
  }
  return out;
}

void write_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries) {
  std::string text;
  for (const auto& e : entries) text += e.utt_id + "\t" + e.feature_path + "\t" + e.transcript + "\n";
  write_all(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  json params = json::array();
  std::vector<std::uint8_t> blob;
  auto add_table = [&](const ParameterTable& table, const std::string& prefix) {
    for (const auto& [name, t] : table) {
      params.push_back({{"name", prefix + name}, {"shape", {t.rows(), t.cols()}}, {"offset", blob.size()}});
      put_floats(blob, t);
    }
  };
  add_table(ckpt.parameters, "");
  add_table(ckpt.adam_m, "adam.m/");
  add_table(ckpt.adam_v, "adam.v/");

  json header = {{"format_version", kCheckpointVersion},
                 {"config", ckpt.config},
                 {"vocab", ckpt.vocab},
                 {"step", ckpt.step},
                 {"epoch", ckpt.epoch},
                 {"parameters", params}};
  const std::string h = header.dump();
  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 8);
  put_u64(out, h.size());
  out.insert(out.end(), h.begin(), h.end());
  out.insert(out.end(), blob.begin(), blob.end());
  write_all(path, out);
}

Checkpoint load_checkpoint(const fs::path& path) {
  const std::vector<std::uint8_t> bytes = read_all(path);
  const std::string where = path.string() + ": ";
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw CheckpointError(where + "bad checkpoint magic at byte offset 0");
  const std::uint64_t hlen = get_u64(bytes.data() + 8);
  if (hlen > bytes.size() - 16) throw CheckpointError(where + "header length exceeds file size");
  json header;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const json::exception& e) {
    throw CheckpointError(where + "malformed header: " + e.what());
  }
  const std::size_t blob_start = 16 + hlen;
  const std::size_t blob_size = bytes.size() - blob_start;

  Checkpoint ckpt;
  try {
    const int version = header.at("format_version").get<int>();
    if (version != kCheckpointVersion)
      throw CheckpointError(where + "unsupported format_version " + std::to_string(version));
    ckpt.config = header.at("config").get<std::map<std::string, std::string>>();
    ckpt.vocab = header.at("vocab").get<std::vector<std::string>>();
    ckpt.step = header.at("step").get<std::int64_t>();
    ckpt.epoch = header.at("epoch").get<std::int64_t>();
    std::size_t expected_offset = 0;
    for (const auto& entry : header.at("parameters")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
      const auto offset = entry.at("offset").get<std::size_t>();
      if (shape.size() != 2) throw CheckpointError(where + "parameter '" + name + "' shape is not 2-D");
      if (offset != expected_offset)
        throw CheckpointError(where + "parameter '" + name + "' at offset " + std::to_string(offset) + ", expected " +
                              std::to_string(expected_offset));
      Tensor2D t(shape[0], shape[1]);
      const std::size_t nbytes = 4 * t.size();
      if (offset + nbytes > blob_size) throw CheckpointError(where + "blob truncated in parameter '" + name + "'");
      get_floats(bytes.data() + blob_start + offset, t);
      expected_offset = offset + nbytes;
      ParameterTable* table = &ckpt.parameters;
      std::string key = name;
      if (name.rfind("adam.m/", 0) == 0) {
        table = &ckpt.adam_m;
        key = name.substr(7);
      } else if (name.rfind("adam.v/", 0) == 0) {
        table = &ckpt.adam_v;
        key = name.substr(7);
      }
      if (!table->emplace(key, std::move(t)).second) throw CheckpointError(where + "duplicate parameter '" + name + "'");
    }
    if (expected_offset != blob_size)
      throw CheckpointError(where + "blob has " + std::to_string(blob_size - expected_offset) + " trailing bytes");
  } catch (const json::exception& e) {
    throw CheckpointError(where + "malformed header: " + e.what());
  }
  return ckpt;
}

}  // namespace cmkt::io
