#include "refex/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

#include <json.hpp>

namespace refex {

using ordered_json = nlohmann::ordered_json;

namespace {

void put_u32_le(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_f32_le(std::string& out, float f) {
  const uint32_t bits = std::bit_cast<uint32_t>(f);
  put_u32_le(out, bits);
}

uint32_t get_u32_le(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) | (static_cast<uint32_t>(p[2]) << 16) |
         (static_cast<uint32_t>(p[3]) << 24);
}

float get_f32_le(const unsigned char* p) { return std::bit_cast<float>(get_u32_le(p)); }

}  // namespace

void save_checkpoint(const ModelWeights<float>& weights, const std::string& path) {
  const EmbeddingTable table = EmbeddingTable::make(weights.config.variant);

  ordered_json header;
  header["version"] = kCheckpointVersion;
  header["variant"] = to_string(weights.config.variant);
  header["layers"] = weights.config.layers;
  header["heads"] = weights.config.heads;
  header["d_model"] = table.d_model();
  ordered_json tensors = ordered_json::array();
  std::string payload;
  size_t offset = 0;
  for_each_param(weights, [&](const std::string& name, const MatF& m) {
    ordered_json t;
    t["name"] = name;
    t["shape"] = {m.rows(), m.cols()};
    t["offset"] = offset;
    tensors.push_back(std::move(t));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) put_f32_le(payload, m(r, c));
    offset += static_cast<size_t>(m.size()) * 4;
  });
  header["tensors"] = std::move(tensors);

  const std::string head = header.dump();
  std::string blob;
  blob.append(kCheckpointMagic, sizeof(kCheckpointMagic));
  put_u32_le(blob, static_cast<uint32_t>(head.size()));
  blob += head;
  blob += payload;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw checkpoint_error(checkpoint_error::Kind::io, "cannot open for writing: " + path);
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw checkpoint_error(checkpoint_error::Kind::io, "write failed: " + path);
}

ModelWeights<float> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw checkpoint_error(checkpoint_error::Kind::io, "cannot open: " + path);
  std::vector<unsigned char> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (blob.size() < sizeof(kCheckpointMagic) + 4 ||
      std::memcmp(blob.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw checkpoint_error(checkpoint_error::Kind::bad_magic, path + ": bad checkpoint magic");

  const uint32_t header_len = get_u32_le(blob.data() + sizeof(kCheckpointMagic));
  const size_t header_at = sizeof(kCheckpointMagic) + 4;
  if (blob.size() < header_at + header_len)
    throw checkpoint_error(checkpoint_error::Kind::truncated, path + ": truncated header");

  ordered_json header;
  try {
    header = ordered_json::parse(blob.begin() + static_cast<long>(header_at),
                                 blob.begin() + static_cast<long>(header_at + header_len));
  } catch (const nlohmann::json::exception& e) {
    throw checkpoint_error(checkpoint_error::Kind::header_parse, path + ": header parse error: " + e.what());
  }

  try {
    if (header.at("version").get<int>() != kCheckpointVersion)
      throw checkpoint_error(checkpoint_error::Kind::version_mismatch,
                             path + ": unsupported checkpoint version " + header.at("version").dump());
    const auto variant = parse_variant(header.at("variant").get<std::string>());
    if (!variant)
      throw checkpoint_error(checkpoint_error::Kind::header_parse,
                             path + ": unknown variant " + header.at("variant").dump());

    ModelConfig config;
    config.variant = *variant;
    config.layers = header.at("layers").get<int>();
    config.heads = header.at("heads").get<int>();
    const EmbeddingTable table = EmbeddingTable::make(*variant);
    if (header.at("d_model").get<int>() != table.d_model())
      throw checkpoint_error(checkpoint_error::Kind::shape_offset,
                             path + ": d_model " + header.at("d_model").dump() + " does not match variant");

    // Read tensor specs in order; d_qk comes from the first head shape.
    struct Spec {
      std::string name;
      Eigen::Index rows, cols;
      size_t offset;
    };
    std::vector<Spec> specs;
    for (const auto& t : header.at("tensors")) {
      specs.push_back({t.at("name").get<std::string>(), t.at("shape").at(0).get<Eigen::Index>(),
                       t.at("shape").at(1).get<Eigen::Index>(), t.at("offset").get<size_t>()});
    }
    if (specs.empty()) throw checkpoint_error(checkpoint_error::Kind::shape_offset, path + ": no tensors");
    config.d_qk = static_cast<int>(specs[0].rows);
    config.validate();

    ModelWeights<float> w = zero_weights<float>(config, table);
    const size_t payload_at = header_at + header_len;
    size_t expect_offset = 0;
    size_t spec_idx = 0;
    for_each_param(w, [&](const std::string& name, MatF& m) {
      if (spec_idx >= specs.size())
        throw checkpoint_error(checkpoint_error::Kind::shape_offset, path + ": missing tensor " + name);
      const Spec& s = specs[spec_idx++];
      if (s.name != name || s.rows != m.rows() || s.cols != m.cols() || s.offset != expect_offset)
        throw checkpoint_error(checkpoint_error::Kind::shape_offset,
                               path + ": tensor '" + s.name + "' shape/offset inconsistent with '" + name + "'");
      const size_t bytes = static_cast<size_t>(m.size()) * 4;
      if (payload_at + s.offset + bytes > blob.size())
        throw checkpoint_error(checkpoint_error::Kind::truncated, path + ": truncated payload at tensor " + name);
      const unsigned char* p = blob.data() + payload_at + s.offset;
      for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c, p += 4) m(r, c) = get_f32_le(p);
      expect_offset += bytes;
    });
    if (spec_idx != specs.size())
      throw checkpoint_error(checkpoint_error::Kind::shape_offset, path + ": unexpected extra tensors in header");
    if (payload_at + expect_offset != blob.size())
      throw checkpoint_error(checkpoint_error::Kind::truncated, path + ": payload size mismatch");
    return w;
  } catch (const nlohmann::json::exception& e) {
    throw checkpoint_error(checkpoint_error::Kind::header_parse, path + ": header schema error: " + e.what());
  }
}

}  // namespace refex
