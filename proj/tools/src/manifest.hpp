#pragma once

#include <json.hpp>

#include <cstdint>
#include <string>

namespace ghnq::cli {

// Run manifest written next to every output. Contains nothing time- or
// host-dependent so reruns with the same inputs produce the same bytes.
class Manifest {
public:
    explicit Manifest(std::string command);

    // Canonical (sorted-key) dump of `config` is hashed into config_hash.
    void config(const nlohmann::json& config);
    void seed(const std::string& name, std::uint64_t value);
    void input(const std::string& role, const std::string& path);
    void output(const std::string& role, const std::string& path);
    void set(const std::string& key, nlohmann::json value);

    std::string text() const;
    void write(const std::string& path) const;

private:
    nlohmann::ordered_json j_;
};

std::string read_file(const std::string& path);
// Writes via a temporary file and rename.
void write_file(const std::string& path, const std::string& bytes);
std::string file_checksum(const std::string& path);
// "out/report.md" -> "out/report" + suffix.
std::string with_suffix(const std::string& path, const std::string& suffix);

} // namespace ghnq::cli
