#pragma once

#include "gridreg/synth.hpp"
#include "gridreg/volume.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace gridreg::cli {

using ojson = nlohmann::ordered_json;

/// Bad flag values or missing required flags; maps to exit code 2.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// "n" or "a,b,c" -> Dims3.
Dims3 parse_dims(const std::string& text, const std::string& flag);
/// Control grid dims; every entry must be >= 2.
Dims3 parse_grid(const std::string& text, const std::string& flag = "--grid");
/// "5,8,10,15" -> isotropic grids; "5x5x8,10x10x10" -> explicit grids.
std::vector<Dims3> parse_grid_list(const std::string& text, const std::string& flag);
std::vector<double> parse_double_list(const std::string& text, const std::string& flag);

/// Flags shared by every subcommand.
struct Common {
    std::string config;
    std::string manifest;
    std::string report = "json";
    std::string report_out;
    std::uint64_t seed = 0;
    int threads = 1;
};

void add_common(CLI::App* sub, Common& common);

/// Boolean flag whose resolved value is echoed in manifests.
CLI::Option* add_switch(CLI::App* sub, const std::string& names, bool& value, const std::string& desc);

/// Fills options that were not given on the command line from a JSON object.
/// The file may be a plain object, an object keyed by subcommand, or a run manifest.
void merge_config(CLI::App* sub, const std::filesystem::path& path);

/// Throws UsageError naming the first missing flag.
void require(const CLI::App* sub, std::initializer_list<const char*> flags);

/// Every option's resolved value as given or defaulted, keyed by long name.
ojson resolved_options(const CLI::App* sub);

struct RunManifest {
    std::string subcommand;
    ojson config;
    std::uint64_t seed = 0;
    ojson inputs = ojson::object();
    ojson outputs = ojson::object();
    double seconds = 0.0;

    void write(const std::filesystem::path& path) const;
};

/// Report rows: a JSON object (one record) or an array of flat objects (a table).
void emit_report(const ojson& report, const std::string& format, const std::string& out_path);
std::string to_csv(const ojson& report);

// Synthetic pair directories written by `synth`.
void save_synth_pair(const SynthPair& pair, const std::filesystem::path& dir);
SynthPair load_synth_pair(const std::filesystem::path& dir);
/// Sorted `pair_*` subdirectories of `dir`.
std::vector<std::filesystem::path> list_pair_dirs(const std::filesystem::path& dir);

} // namespace gridreg::cli
