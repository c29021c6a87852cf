#include "cli_support.hpp"

#include "gridreg/gridfield.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

namespace fs = std::filesystem;

namespace gridreg::cli {

namespace {

std::vector<std::string> split(const std::string& text, char sep) {
    std::vector<std::string> parts;
    std::string item;
    std::istringstream in(text);
    while (std::getline(in, item, sep)) {
        parts.push_back(item);
    }
    if (!text.empty() && text.back() == sep) {
        parts.emplace_back();
    }
    return parts;
}

int parse_int(const std::string& s, const std::string& flag, const std::string& whole) {
    int v = 0;
    const auto* end = s.data() + s.size();
    const auto [ptr, ec] = std::from_chars(s.data(), end, v);
    if (s.empty() || ec != std::errc() || ptr != end) {
        throw UsageError(flag + ": expected integers, got '" + whole + "'");
    }
    return v;
}

std::string join(const std::vector<std::string>& items) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        out += (i ? "," : "") + items[i];
    }
    return out;
}

std::string json_to_text(const nlohmann::json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    if (v.is_array()) {
        std::vector<std::string> parts;
        for (const auto& e : v) parts.push_back(json_to_text(e));
        return join(parts);
    }
    return v.dump();
}

std::map<const CLI::Option*, const bool*>& switches() {
    static std::map<const CLI::Option*, const bool*> registry;
    return registry;
}

bool skip_option(const CLI::Option* opt) {
    const auto& names = opt->get_lnames();
    if (names.empty()) return true;
    const auto& n = names.front();
    return n == "help" || n == "config" || n == "manifest";
}

} // namespace

Dims3 parse_dims(const std::string& text, const std::string& flag) {
    const auto parts = split(text, ',');
    if (parts.size() == 1) {
        const int v = parse_int(parts[0], flag, text);
        return Dims3::Constant(v);
    }
    if (parts.size() != 3) {
        throw UsageError(flag + ": expected n or a,b,c, got '" + text + "'");
    }
    return Dims3(parse_int(parts[0], flag, text), parse_int(parts[1], flag, text), parse_int(parts[2], flag, text));
}

Dims3 parse_grid(const std::string& text, const std::string& flag) {
    const Dims3 g = parse_dims(text, flag);
    if ((g < 2).any()) {
        throw UsageError("grid_dim must be ≥ 2, got " + text);
    }
    return g;
}

std::vector<Dims3> parse_grid_list(const std::string& text, const std::string& flag) {
    std::vector<Dims3> grids;
    for (const auto& item : split(text, ',')) {
        if (item.find('x') != std::string::npos) {
            const auto parts = split(item, 'x');
            if (parts.size() != 3) {
                throw UsageError(flag + ": expected axbxc, got '" + item + "'");
            }
            grids.emplace_back(parse_int(parts[0], flag, text), parse_int(parts[1], flag, text),
                               parse_int(parts[2], flag, text));
        } else {
            grids.push_back(Dims3::Constant(parse_int(item, flag, text)));
        }
        if ((grids.back() < 2).any()) {
            throw UsageError("grid_dim must be ≥ 2, got " + item);
        }
    }
    if (grids.empty()) {
        throw UsageError(flag + ": no grids given");
    }
    return grids;
}

std::vector<double> parse_double_list(const std::string& text, const std::string& flag) {
    std::vector<double> out;
    for (const auto& item : split(text, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw UsageError(flag + ": expected numbers, got '" + text + "'");
        }
    }
    if (out.empty()) {
        throw UsageError(flag + ": empty list");
    }
    return out;
}

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "JSON file of flag values; command-line flags win");
    sub->add_option("--manifest", c.manifest, "Run manifest path (default: next to the primary output)");
    sub->add_option("--report", c.report, "Report format")->check(CLI::IsMember({"json", "csv"}));
    sub->add_option("--report-out", c.report_out, "Write the report here instead of stdout");
    sub->add_option("--seed", c.seed, "Root seed for every random stream");
    sub->add_option("--threads", c.threads, "Worker threads for per-voxel loops")->check(CLI::PositiveNumber);
}

CLI::Option* add_switch(CLI::App* sub, const std::string& names, bool& value, const std::string& desc) {
    auto* opt = sub->add_flag(names, value, desc);
    switches()[opt] = &value;
    return opt;
}

void merge_config(CLI::App* sub, const fs::path& path) {
    nlohmann::json root;
    try {
        root = nlohmann::json::parse(io::read_text(path));
    } catch (const nlohmann::json::exception& e) {
        throw UsageError("--config: " + path.string() + ": " + e.what());
    }
    if (root.contains("kind") && root["kind"] == "run_manifest") {
        root = root.at("config");
    } else if (root.contains(sub->get_name()) && root[sub->get_name()].is_object()) {
        root = root[sub->get_name()];
    }
    if (!root.is_object()) {
        throw UsageError("--config: expected a JSON object in " + path.string());
    }
    for (const auto& [key, value] : root.items()) {
        std::string name = key;
        std::replace(name.begin(), name.end(), '_', '-');
        if (name == "config" || name == "manifest") continue;
        CLI::Option* opt = nullptr;
        try {
            opt = sub->get_option("--" + name);
        } catch (const CLI::OptionNotFound&) {
            throw UsageError("--config: unknown key '" + key + "' for " + sub->get_name());
        }
        if (opt->count() > 0) continue;
        const std::string text = json_to_text(value);
        if (text.empty()) continue;
        opt->add_result(text);
        try {
            opt->run_callback();
        } catch (const CLI::Error& e) {
            throw UsageError("--config: " + key + ": " + e.what());
        }
    }
}

void require(const CLI::App* sub, std::initializer_list<const char*> flags) {
    for (const char* f : flags) {
        const auto* opt = sub->get_option(f);
        if (opt->count() == 0) {
            throw UsageError(std::string(f) + " is required");
        }
    }
}

ojson resolved_options(const CLI::App* sub) {
    ojson out = ojson::object();
    for (const auto* opt : sub->get_options()) {
        if (skip_option(opt)) continue;
        const auto sw = switches().find(opt);
        if (sw != switches().end()) {
            out[opt->get_lnames().front()] = *sw->second;
            continue;
        }
        const std::string value = opt->count() > 0 ? join(opt->results()) : opt->get_default_str();
        out[opt->get_lnames().front()] = value;
    }
    return out;
}

void RunManifest::write(const fs::path& path) const {
    ojson m;
    m["kind"] = "run_manifest";
    m["subcommand"] = subcommand;
    m["tool_version"] = GRIDREG_VERSION;
    m["seed"] = seed;
    m["config"] = config;
    m["inputs"] = inputs;
    m["outputs"] = outputs;
    m["wall_clock_seconds"] = seconds;
    io::write_text_atomic(path, m.dump(2) + "\n");
}

namespace {

void flatten(const ojson& v, const std::string& prefix, ojson& out) {
    if (v.is_object()) {
        for (const auto& [k, e] : v.items()) {
            flatten(e, prefix.empty() ? k : prefix + "." + k, out);
        }
    } else {
        out[prefix] = v;
    }
}

std::string cell(const ojson& v) {
    if (v.is_null()) return "";
    if (v.is_string()) return v.get<std::string>();
    if (v.is_array()) {
        std::string out;
        for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "x" : "") + cell(v[i]);
        return out;
    }
    if (v.is_number_float()) {
        std::ostringstream os;
        os.imbue(std::locale::classic());
        os.precision(10);
        os << v.get<double>();
        return os.str();
    }
    return v.dump();
}

} // namespace

std::string to_csv(const ojson& report) {
    std::vector<ojson> rows;
    if (report.is_array()) {
        for (const auto& r : report) {
            ojson flat = ojson::object();
            flatten(r, "", flat);
            rows.push_back(flat);
        }
    } else {
        ojson flat = ojson::object();
        flatten(report, "", flat);
        rows.push_back(flat);
    }
    std::ostringstream os;
    if (rows.empty()) return "";
    std::vector<std::string> header;
    for (const auto& [k, v] : rows.front().items()) header.push_back(k);
    os << join(header) << "\n";
    for (const auto& r : rows) {
        std::vector<std::string> cells;
        for (const auto& k : header) cells.push_back(r.contains(k) ? cell(r[k]) : "");
        os << join(cells) << "\n";
    }
    return os.str();
}

void emit_report(const ojson& report, const std::string& format, const std::string& out_path) {
    const std::string text = format == "csv" ? to_csv(report) : report.dump(2) + "\n";
    if (out_path.empty()) {
        std::cout << text;
    } else {
        io::write_text_atomic(out_path, text);
    }
}

void save_synth_pair(const SynthPair& p, const fs::path& dir) {
    fs::create_directories(dir);
    save_volume(p.fixed, dir / "fixed");
    save_volume(p.moving, dir / "moving");
    save_volume(p.fixed_mask, dir / "fixed_mask");
    save_volume(p.moving_mask, dir / "moving_mask");
    save_landmarks(p.fixed_landmarks, dir / "fixed_landmarks.csv");
    save_landmarks(p.moving_landmarks, dir / "moving_landmarks.csv");
    save_field(p.gt.cast<float>(), dir / "gt_field");
    ojson meta;
    meta["seed"] = p.seed;
    meta["intensity_noise"] = p.intensity_noise;
    meta["label_noise"] = p.label_noise;
    io::write_text_atomic(dir / "pair.json", meta.dump(2) + "\n");
}

SynthPair load_synth_pair(const fs::path& dir) {
    Volume fixed = load_volume(dir / "fixed");
    Volume moving = load_volume(dir / "moving");
    MaskVolume fixed_mask = load_mask(dir / "fixed_mask");
    MaskVolume moving_mask = load_mask(dir / "moving_mask");
    const GriddedField<double> gt = load_field(dir / "gt_field").cast<double>();
    SynthPair p{std::move(fixed),
                std::move(moving),
                std::move(fixed_mask),
                std::move(moving_mask),
                load_landmarks(dir / "fixed_landmarks.csv"),
                load_landmarks(dir / "moving_landmarks.csv"),
                gt,
                upsample_trilinear(gt, gt.grid.image_dims),
                0,
                0.0,
                0.0};
    if (fs::exists(dir / "pair.json")) {
        const auto meta = nlohmann::json::parse(io::read_text(dir / "pair.json"));
        p.seed = meta.value("seed", std::uint64_t{0});
        p.intensity_noise = meta.value("intensity_noise", 0.0);
        p.label_noise = meta.value("label_noise", 0.0);
    }
    return p;
}

std::vector<fs::path> list_pair_dirs(const fs::path& dir) {
    if (!fs::is_directory(dir)) {
        throw std::runtime_error("not a directory: " + dir.string());
    }
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_directory() && e.path().filename().string().rfind("pair_", 0) == 0) {
            out.push_back(e.path());
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

} // namespace gridreg::cli
