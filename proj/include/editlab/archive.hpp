#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace editlab {

// On-disk container shared by checkpoints, edit plans and covariance caches:
// a text header (JSON tensor directory + metadata) followed by raw
// little-endian tensor payloads. Round-trips are bit-exact.
//
//   EDITLAB-ARCHIVE v1 <kind>\n
//   <header byte count>\n
//   <JSON header>\n
//   <payload bytes>
//
// Header: {"tensors": [{"name","dtype","shape","offset","bytes"}...],
//          "meta": {...}}   offsets are relative to the payload start.

struct ArchiveTensor {
    std::string name;
    std::string dtype;  // "f32" or "f64"
    std::vector<int64_t> shape;
    std::vector<char> bytes;

    size_t element_count() const;
    const float* as_f32() const;
    const double* as_f64() const;
};

struct Archive {
    std::string kind;
    nlohmann::json meta;
    std::vector<ArchiveTensor> tensors;

    const ArchiveTensor* find(const std::string& name) const;
    const ArchiveTensor& require(const std::string& name) const;

    void add_f32(const std::string& name, std::vector<int64_t> shape, const float* data);
    void add_f64(const std::string& name, std::vector<int64_t> shape, const double* data);
};

void write_archive(const std::string& path, const Archive& a);
Archive read_archive(const std::string& path, const std::string& expected_kind);

// FNV-1a fingerprint over kind, metadata and all tensor payloads.
uint64_t archive_fingerprint(const Archive& a);

}  // namespace editlab
