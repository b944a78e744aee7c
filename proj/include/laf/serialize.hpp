#pragma once

#include "laf/tensor.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace laf {

// Tensor container file: "LAF1" magic, u64 manifest length, JSON manifest,
// then a little-endian raw data blob. The manifest lists (name, shape, dtype,
// byte offset) per tensor plus an optional free-form "meta" object.
//
// Only little-endian hosts are supported; the format is defined little-endian.
static_assert(std::endian::native == std::endian::little, "little-endian host required");

struct TensorFile {
  std::map<std::string, Tensor<double>> tensors;
  nlohmann::json meta;  // caller-owned metadata (model config, step counter, ...)
};

inline void save_tensor_file(const std::string& path, const TensorFile& tf) {
  nlohmann::json manifest;
  manifest["meta"] = tf.meta.is_null() ? nlohmann::json::object() : tf.meta;
  nlohmann::json entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tf.tensors) {
    nlohmann::json e;
    e["name"] = name;
    e["shape"] = t.shape();
    e["dtype"] = "f64";
    e["offset"] = offset;
    entries.push_back(e);
    offset += static_cast<std::uint64_t>(t.size()) * sizeof(double);
  }
  manifest["tensors"] = entries;
  const std::string mjson = manifest.dump();

  std::ofstream f(path, std::ios::binary);
  check(f.good(), "save_tensor_file: cannot open " + path);
  f.write("LAF1", 4);
  const std::uint64_t mlen = mjson.size();
  f.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
  f.write(mjson.data(), static_cast<std::streamsize>(mjson.size()));
  for (const auto& [name, t] : tf.tensors)
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
  check(f.good(), "save_tensor_file: write failed for " + path);
}

inline TensorFile load_tensor_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), "load_tensor_file: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  check(f.good() && std::memcmp(magic, "LAF1", 4) == 0,
        "load_tensor_file: bad magic in " + path);
  std::uint64_t mlen = 0;
  f.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
  check(f.good(), "load_tensor_file: truncated manifest length");
  std::string mjson(mlen, '\0');
  f.read(mjson.data(), static_cast<std::streamsize>(mlen));
  check(f.good(), "load_tensor_file: truncated manifest");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mjson);
  } catch (const nlohmann::json::exception& e) {
    check(false, std::string("load_tensor_file: corrupt manifest: ") + e.what());
  }

  TensorFile tf;
  tf.meta = manifest.value("meta", nlohmann::json::object());
  const std::uint64_t blob_start = 4 + sizeof(std::uint64_t) + mlen;
  for (const auto& e : manifest.at("tensors")) {
    const std::string name = e.at("name").get<std::string>();
    const std::vector<Index> shape = e.at("shape").get<std::vector<Index>>();
    check(e.at("dtype").get<std::string>() == "f64",
          "load_tensor_file: unsupported dtype for tensor " + name);
    Tensor<double> t(shape);
    f.seekg(static_cast<std::streamoff>(blob_start + e.at("offset").get<std::uint64_t>()));
    f.read(reinterpret_cast<char*>(t.data()),
           static_cast<std::streamsize>(t.size() * sizeof(double)));
    check(f.good(), "load_tensor_file: truncated data for tensor " + name);
    tf.tensors.emplace(name, std::move(t));
  }
  return tf;
}

}  // namespace laf
