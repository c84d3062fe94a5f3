#include "editlab/archive.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include "editlab/rng.hpp"

namespace editlab {

namespace {

size_t dtype_size(const std::string& dtype) {
    if (dtype == "f32") return 4;
    if (dtype == "f64") return 8;
    throw std::runtime_error("archive: unknown dtype '" + dtype + "'");
}

size_t shape_elements(const std::vector<int64_t>& shape) {
    size_t n = 1;
    for (int64_t d : shape) {
        if (d < 0) throw std::runtime_error("archive: negative dimension");
        n *= static_cast<size_t>(d);
    }
    return n;
}

}  // namespace

size_t ArchiveTensor::element_count() const { return shape_elements(shape); }

const float* ArchiveTensor::as_f32() const {
    if (dtype != "f32") throw std::runtime_error("tensor '" + name + "' is not f32");
    return reinterpret_cast<const float*>(bytes.data());
}

const double* ArchiveTensor::as_f64() const {
    if (dtype != "f64") throw std::runtime_error("tensor '" + name + "' is not f64");
    return reinterpret_cast<const double*>(bytes.data());
}

const ArchiveTensor* Archive::find(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return &t;
    return nullptr;
}

const ArchiveTensor& Archive::require(const std::string& name) const {
    const ArchiveTensor* t = find(name);
    if (!t) throw std::runtime_error("archive: missing tensor '" + name + "'");
    return *t;
}

void Archive::add_f32(const std::string& name, std::vector<int64_t> shape, const float* data) {
    ArchiveTensor t;
    t.name = name;
    t.dtype = "f32";
    t.shape = std::move(shape);
    t.bytes.resize(t.element_count() * 4);
    std::memcpy(t.bytes.data(), data, t.bytes.size());
    tensors.push_back(std::move(t));
}

void Archive::add_f64(const std::string& name, std::vector<int64_t> shape, const double* data) {
    ArchiveTensor t;
    t.name = name;
    t.dtype = "f64";
    t.shape = std::move(shape);
    t.bytes.resize(t.element_count() * 8);
    std::memcpy(t.bytes.data(), data, t.bytes.size());
    tensors.push_back(std::move(t));
}

void write_archive(const std::string& path, const Archive& a) {
    nlohmann::json header;
    header["meta"] = a.meta;
    nlohmann::json dir = nlohmann::json::array();
    size_t offset = 0;
    for (const auto& t : a.tensors) {
        dir.push_back({{"name", t.name},
                       {"dtype", t.dtype},
                       {"shape", t.shape},
                       {"offset", offset},
                       {"bytes", t.bytes.size()}});
        offset += t.bytes.size();
    }
    header["tensors"] = std::move(dir);
    const std::string header_str = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("archive: cannot open '" + path + "' for writing");
    out << "EDITLAB-ARCHIVE v1 " << a.kind << "\n";
    out << header_str.size() << "\n";
    out << header_str << "\n";
    for (const auto& t : a.tensors) out.write(t.bytes.data(), static_cast<std::streamsize>(t.bytes.size()));
    if (!out) throw std::runtime_error("archive: write failed for '" + path + "'");
}

Archive read_archive(const std::string& path, const std::string& expected_kind) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("archive: cannot open '" + path + "'");

    std::string magic;
    std::getline(in, magic);
    const std::string prefix = "EDITLAB-ARCHIVE v1 ";
    if (magic.rfind(prefix, 0) != 0)
        throw std::runtime_error("archive: '" + path + "' has unsupported format or version");
    Archive a;
    a.kind = magic.substr(prefix.size());
    if (!expected_kind.empty() && a.kind != expected_kind)
        throw std::runtime_error("archive: '" + path + "' holds a '" + a.kind + "', expected '" +
                                 expected_kind + "'");

    std::string len_line;
    std::getline(in, len_line);
    size_t header_len = 0;
    try {
        header_len = std::stoull(len_line);
    } catch (const std::exception&) {
        throw std::runtime_error("archive: malformed header length in '" + path + "'");
    }

    std::string header_str(header_len, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(header_len));
    if (in.gcount() != static_cast<std::streamsize>(header_len))
        throw std::runtime_error("archive: truncated header in '" + path + "'");
    in.get();  // trailing newline

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_str);
    } catch (const std::exception& e) {
        throw std::runtime_error("archive: bad header JSON in '" + path + "': " + e.what());
    }
    a.meta = header.value("meta", nlohmann::json::object());

    std::vector<char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    for (const auto& ent : header.at("tensors")) {
        ArchiveTensor t;
        t.name = ent.at("name").get<std::string>();
        t.dtype = ent.at("dtype").get<std::string>();
        t.shape = ent.at("shape").get<std::vector<int64_t>>();
        const size_t offset = ent.at("offset").get<size_t>();
        const size_t bytes = ent.at("bytes").get<size_t>();
        if (bytes != t.element_count() * dtype_size(t.dtype))
            throw std::runtime_error("archive: tensor '" + t.name + "' byte count disagrees with shape");
        if (offset + bytes > payload.size())
            throw std::runtime_error("archive: '" + path + "' is truncated (tensor '" + t.name + "')");
        t.bytes.assign(payload.begin() + static_cast<ptrdiff_t>(offset),
                       payload.begin() + static_cast<ptrdiff_t>(offset + bytes));
        a.tensors.push_back(std::move(t));
    }
    return a;
}

uint64_t archive_fingerprint(const Archive& a) {
    Fnv1a h;
    h.update(a.kind.data(), a.kind.size());
    const std::string meta = a.meta.dump();
    h.update(meta.data(), meta.size());
    for (const auto& t : a.tensors) {
        h.update(t.name.data(), t.name.size());
        h.update(t.dtype.data(), t.dtype.size());
        h.update(t.bytes.data(), t.bytes.size());
    }
    return h.digest();
}

}  // namespace editlab
