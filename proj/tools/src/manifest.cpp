#include "manifest.hpp"

#include "ghnq/archspace.hpp"
#include "ghnq/error.hpp"
#include "ghnq/ghn.hpp"
#include "ghnq/tensor.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#ifndef GHNQ_VERSION
#define GHNQ_VERSION "unknown"
#endif

namespace ghnq::cli {

using nlohmann::json;
using nlohmann::ordered_json;

Manifest::Manifest(std::string command)
{
    j_["tool"] = "ghnq";
    j_["version"] = GHNQ_VERSION;
    j_["command"] = std::move(command);
    j_["versions"] = {
        {"ghnq", GHNQ_VERSION},
        {"checkpoint_format", kCheckpointVersion},
        {"graph_format", 1},
        {"compiler", __VERSION__},
        {"cxx_standard", static_cast<long>(__cplusplus)},
    };
    j_["seeds"] = ordered_json::object();
    j_["inputs"] = ordered_json::object();
    j_["outputs"] = ordered_json::object();
}

void Manifest::config(const json& config)
{
    // nlohmann::json keeps object keys sorted, so dump() is canonical.
    const std::string canonical = json(config).dump();
    j_["config_hash"] = hex64(checksum_bytes(canonical));
    j_["config"] = config;
}

void Manifest::seed(const std::string& name, std::uint64_t value)
{
    j_["seeds"][name] = value;
}

void Manifest::input(const std::string& role, const std::string& path)
{
    j_["inputs"][role] = {{"path", path}, {"checksum", file_checksum(path)}};
}

void Manifest::output(const std::string& role, const std::string& path)
{
    j_["outputs"][role] = {{"path", path}, {"checksum", file_checksum(path)}};
}

void Manifest::set(const std::string& key, json value)
{
    j_[key] = std::move(value);
}

std::string Manifest::text() const
{
    return j_.dump(2) + "\n";
}

void Manifest::write(const std::string& path) const
{
    write_file(path, text());
}

std::string read_file(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error("cannot read '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& bytes)
{
    const std::filesystem::path p(path);
    if (p.has_parent_path())
        std::filesystem::create_directories(p.parent_path());
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out)
            throw Error("cannot write '" + path + "'");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out)
            throw Error("write failed for '" + path + "'");
    }
    std::filesystem::rename(tmp, p);
}

std::string file_checksum(const std::string& path)
{
    if (!std::filesystem::is_regular_file(path))
        return "";
    return hex64(checksum_bytes(read_file(path)));
}

std::string with_suffix(const std::string& path, const std::string& suffix)
{
    std::filesystem::path p(path);
    p.replace_extension();
    return p.string() + suffix;
}

} // namespace ghnq::cli
