// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ehicl/tensor.hpp"

namespace ehicl {

/// Container layout shared by rig and checkpoint files:
///
///   magic (6 bytes) | u64 LE manifest length | manifest JSON |
///   concatenated little-endian IEEE-754 doubles
///
/// The manifest carries an "arrays" list of {name, shape} in blob order in
/// addition to whatever the caller puts there.
struct BlobArray {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

struct BlobFile {
  nlohmann::json manifest;
  std::vector<BlobArray> arrays;

  /// Throws ManifestMismatchError when absent or when `shape` disagrees.
  const BlobArray& get(const std::string& name, const Shape& shape) const;
  const BlobArray* find(const std::string& name) const;
};

void write_blob_file(const std::filesystem::path& path, std::string_view magic,
                     nlohmann::json manifest, const std::vector<BlobArray>& arrays);

/// FormatVersionError on a foreign magic, TruncatedBlobError when the file
/// ends early, ManifestMismatchError when the manifest and payload disagree.
BlobFile read_blob_file(const std::filesystem::path& path, std::string_view magic);

}  // namespace ehicl
