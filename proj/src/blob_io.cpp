// SPDX-License-Identifier: Apache-2.0
#include "ehicl/blob_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

#include "ehicl/error.hpp"

namespace ehicl {

namespace {

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

}  // namespace

const BlobArray* BlobFile::find(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

const BlobArray& BlobFile::get(const std::string& name, const Shape& shape) const {
  const BlobArray* a = find(name);
  if (!a) throw ManifestMismatchError("blob '" + name + "' missing from file");
  if (a->shape != shape) {
    throw ManifestMismatchError("blob '" + name + "' has shape " + shape_str(a->shape) +
                                ", expected " + shape_str(shape));
  }
  return *a;
}

void write_blob_file(const std::filesystem::path& path, std::string_view magic,
                     nlohmann::json manifest, const std::vector<BlobArray>& arrays) {
  nlohmann::json listing = nlohmann::json::array();
  for (const auto& a : arrays) {
    if (shape_numel(a.shape) != a.data.size()) {
      throw ShapeError("write_blob_file: '" + a.name + "' shape " + shape_str(a.shape) +
                       " does not match " + std::to_string(a.data.size()) + " values");
    }
    listing.push_back({{"name", a.name}, {"shape", a.shape}});
  }
  manifest["arrays"] = listing;
  const std::string text = manifest.dump();

  std::string out(magic);
  put_u64(out, text.size());
  out += text;
  for (const auto& a : arrays) {
    for (double d : a.data) put_u64(out, std::bit_cast<std::uint64_t>(d));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open '" + path.string() + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw Error("write to '" + path.string() + "' failed");
}

BlobFile read_blob_file(const std::filesystem::path& path, std::string_view magic) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const std::string where = "'" + path.string() + "'";

  if (bytes.size() < magic.size() || bytes.compare(0, magic.size(), magic) != 0) {
    if (bytes.size() < magic.size() && magic.compare(0, bytes.size(), bytes) == 0) {
      throw TruncatedBlobError(where + ": file ends inside the header");
    }
    throw FormatVersionError(where + ": bad magic, expected " + std::string(magic));
  }
  std::size_t pos = magic.size();
  if (bytes.size() < pos + 8) throw TruncatedBlobError(where + ": file ends inside the header");
  const std::uint64_t manifest_len = get_u64(bytes.data() + pos);
  pos += 8;
  if (bytes.size() - pos < manifest_len) throw TruncatedBlobError(where + ": manifest truncated");

  BlobFile out;
  try {
    out.manifest = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                         bytes.begin() + static_cast<std::ptrdiff_t>(pos + manifest_len));
  } catch (const nlohmann::json::exception& e) {
    throw ManifestMismatchError(where + ": manifest is not valid JSON: " + e.what());
  }
  pos += manifest_len;

  std::size_t expected = 0;
  try {
    for (const auto& entry : out.manifest.at("arrays")) {
      BlobArray a;
      a.name = entry.at("name").get<std::string>();
      a.shape = entry.at("shape").get<Shape>();
      expected += shape_numel(a.shape);
      out.arrays.push_back(std::move(a));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ManifestMismatchError(where + ": malformed array listing: " + e.what());
  }
  const std::size_t payload = bytes.size() - pos;
  if (payload < expected * 8) {
    throw TruncatedBlobError(where + ": payload has " + std::to_string(payload) +
                             " bytes, manifest needs " + std::to_string(expected * 8));
  }
  if (payload > expected * 8) {
    throw ManifestMismatchError(where + ": " + std::to_string(payload - expected * 8) +
                                " trailing bytes not described by the manifest");
  }
  for (auto& a : out.arrays) {
    a.data.resize(shape_numel(a.shape));
    for (double& d : a.data) {
      d = std::bit_cast<double>(get_u64(bytes.data() + pos));
      pos += 8;
    }
  }
  return out;
}

}  // namespace ehicl
