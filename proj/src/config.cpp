#include "ptrack/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <variant>
#include <vector>

#include "ptrack/errors.hpp"

namespace ptrack {

namespace {

using FieldPtr =
    std::variant<std::size_t Config::*, double Config::*, bool Config::*, std::string Config::*>;

const std::vector<std::pair<std::string, FieldPtr>>& fields() {
  static const std::vector<std::pair<std::string, FieldPtr>> table = {
      {"n_template", &Config::n_template},
      {"n_search", &Config::n_search},
      {"channels1", &Config::channels1},
      {"channels2", &Config::channels2},
      {"channels3", &Config::channels3},
      {"out_channels", &Config::out_channels},
      {"neighbors1", &Config::neighbors1},
      {"neighbors2", &Config::neighbors2},
      {"neighbors3", &Config::neighbors3},
      {"heads", &Config::heads},
      {"use_norm", &Config::use_norm},
      {"correlation_k", &Config::correlation_k},
      {"iterations", &Config::iterations},
      {"use_ego", &Config::use_ego},
      {"use_cosine", &Config::use_cosine},
      {"head_channels", &Config::head_channels},
      {"bev_extent_x", &Config::bev_extent_x},
      {"bev_extent_y", &Config::bev_extent_y},
      {"bev_cell", &Config::bev_cell},
      {"search_margin", &Config::search_margin},
      {"w_heatmap", &Config::w_heatmap},
      {"w_offset", &Config::w_offset},
      {"w_z", &Config::w_z},
      {"w_yaw", &Config::w_yaw},
      {"lr", &Config::lr},
      {"steps", &Config::steps},
      {"optimizer", &Config::optimizer},
      {"jitter_pos", &Config::jitter_pos},
      {"jitter_yaw_deg", &Config::jitter_yaw_deg},
      {"category", &Config::category},
  };
  return table;
}

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

/// Shortest decimal form that parses back to the same double.
std::string fmt_double(double v) {
  for (int precision = 1; precision <= 17; ++precision) {
    std::ostringstream os;
    os.precision(precision);
    os << v;
    if (std::strtod(os.str().c_str(), nullptr) == v) return os.str();
  }
  return std::to_string(v);
}

struct Setter {
  Config& config;
  const std::string& key;
  const std::string& value;
  std::size_t line;

  [[noreturn]] void fail(const char* kind) const {
    throw DataError("config line " + std::to_string(line) + ": key " + key + " expects a " +
                    kind + ", got '" + value + "'");
  }
  void operator()(std::size_t Config::* f) const {
    if (value.empty() || value.find_first_not_of("0123456789") != std::string::npos)
      fail("non-negative integer");
    config.*f = static_cast<std::size_t>(std::strtoull(value.c_str(), nullptr, 10));
  }
  void operator()(double Config::* f) const {
    char* end = nullptr;
    double v = std::strtod(value.c_str(), &end);
    if (value.empty() || end != value.c_str() + value.size()) fail("number");
    config.*f = v;
  }
  void operator()(bool Config::* f) const {
    if (value == "true")
      config.*f = true;
    else if (value == "false")
      config.*f = false;
    else
      fail("boolean (true/false)");
  }
  void operator()(std::string Config::* f) const {
    if (value.empty()) fail("non-empty string");
    config.*f = value;
  }
};

struct Getter {
  const Config& config;
  std::string operator()(std::size_t Config::* f) const { return std::to_string(config.*f); }
  std::string operator()(double Config::* f) const { return fmt_double(config.*f); }
  std::string operator()(bool Config::* f) const { return config.*f ? "true" : "false"; }
  std::string operator()(std::string Config::* f) const { return config.*f; }
};

}  // namespace

Config parse_config(const std::string& text) {
  Config config;
  std::set<std::string> seen;
  std::vector<std::string> unknown;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = raw;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw DataError("config line " + std::to_string(line_no) + ": expected key = value, got '" +
                      trim(raw) + "'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw DataError("config line " + std::to_string(line_no) + ": missing key");
    const FieldPtr* field = nullptr;
    for (const auto& [name, ptr] : fields()) {
      if (name == key) {
        field = &ptr;
        break;
      }
    }
    if (field == nullptr) {
      unknown.push_back(key);
      continue;
    }
    if (!seen.insert(key).second)
      throw DataError("config line " + std::to_string(line_no) + ": duplicate key " + key);
    std::visit(Setter{config, key, value, line_no}, *field);
  }
  if (!unknown.empty()) {
    std::string msg = "config: unknown keys:";
    for (const std::string& k : unknown) msg += " " + k;
    throw DataError(msg);
  }
  return config;
}

std::string serialize_config(const Config& config) {
  std::string out;
  for (const auto& [name, ptr] : fields()) {
    out += name;
    out += " = ";
    out += std::visit(Getter{config}, ptr);
    out += "\n";
  }
  return out;
}

Config load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

ModelConfig model_config(const Config& config) {
  ModelConfig mc;
  mc.n_template = config.n_template;
  mc.n_search = config.n_search;
  mc.backbone.channels = {config.channels1, config.channels2, config.channels3};
  mc.backbone.out_channels = config.out_channels;
  mc.backbone.neighbors = {config.neighbors1, config.neighbors2, config.neighbors3};
  mc.backbone.heads = config.heads;
  mc.backbone.use_norm = config.use_norm;
  mc.correlation_k = config.correlation_k;
  mc.iterations = config.iterations;
  mc.use_ego = config.use_ego;
  mc.use_cosine = config.use_cosine;
  mc.head_channels = config.head_channels;
  mc.grid.extent_x = config.bev_extent_x;
  mc.grid.extent_y = config.bev_extent_y;
  mc.grid.cell = config.bev_cell;
  mc.search_margin = config.search_margin;
  return mc;
}

}  // namespace ptrack
