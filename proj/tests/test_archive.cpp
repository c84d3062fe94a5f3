#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>

#include <doctest.h>

#include "editlab/archive.hpp"

using namespace editlab;

namespace {

std::string temp_path(const char* name) {
    return std::string("archive_test_") + name + ".bin";
}

Archive sample_archive() {
    Archive a;
    a.kind = "checkpoint";
    a.meta = {{"seed", 7}, {"note", "sample"}};
    const float f[6] = {1.0f, -2.5f, 0.0f, 3.25f, 1e-30f, 1e30f};
    const double d[2] = {3.141592653589793, -1e-200};
    a.add_f32("weights", {2, 3}, f);
    a.add_f64("stats", {2}, d);
    return a;
}

}  // namespace

TEST_CASE("archive round-trip is bit-exact") {
    const std::string path = temp_path("roundtrip");
    Archive a = sample_archive();
    write_archive(path, a);
    Archive b = read_archive(path, "checkpoint");

    CHECK(b.kind == a.kind);
    CHECK(b.meta == a.meta);
    REQUIRE(b.tensors.size() == 2);
    CHECK(b.require("weights").bytes == a.require("weights").bytes);
    CHECK(b.require("weights").shape == std::vector<int64_t>{2, 3});
    CHECK(b.require("stats").as_f64()[0] == 3.141592653589793);
    CHECK(archive_fingerprint(a) == archive_fingerprint(b));
    std::remove(path.c_str());
}

TEST_CASE("archive rejects a mismatched kind") {
    const std::string path = temp_path("kind");
    write_archive(path, sample_archive());
    CHECK_THROWS_WITH_AS(read_archive(path, "edit_plan"),
                         doctest::Contains("expected 'edit_plan'"), std::runtime_error);
    std::remove(path.c_str());
}

TEST_CASE("archive detects truncation") {
    const std::string path = temp_path("trunc");
    write_archive(path, sample_archive());

    std::ifstream in(path, std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(all.data(), static_cast<std::streamsize>(all.size() - 10));
    out.close();

    CHECK_THROWS_WITH_AS(read_archive(path, "checkpoint"), doctest::Contains("truncated"),
                         std::runtime_error);
    std::remove(path.c_str());
}

TEST_CASE("archive rejects foreign files and missing tensors") {
    const std::string path = temp_path("magic");
    std::ofstream out(path, std::ios::binary);
    out << "not an archive at all\n";
    out.close();
    CHECK_THROWS_AS(read_archive(path, ""), std::runtime_error);
    std::remove(path.c_str());

    Archive a = sample_archive();
    CHECK(a.find("nope") == nullptr);
    CHECK_THROWS_WITH_AS(a.require("nope"), doctest::Contains("missing tensor"),
                         std::runtime_error);
    CHECK_THROWS_AS(a.require("weights").as_f64(), std::runtime_error);
}

TEST_CASE("fingerprint tracks content") {
    Archive a = sample_archive();
    Archive b = sample_archive();
    CHECK(archive_fingerprint(a) == archive_fingerprint(b));
    b.tensors[0].bytes[0] ^= 1;
    CHECK(archive_fingerprint(a) != archive_fingerprint(b));
    Archive c = sample_archive();
    c.meta["seed"] = 8;
    CHECK(archive_fingerprint(a) != archive_fingerprint(c));
}
