#pragma once

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "blackfed/orchestrator.hpp"

namespace blackfed {

/// Parse failure with a 1-based source position.
class ConfigError : public Error {
 public:
  ConfigError(std::size_t line, std::size_t column, const std::string& what)
      : Error(ErrorCode::config, "line " + std::to_string(line) + ", column " + std::to_string(column) + ": " + what),
        line_(line),
        column_(column) {}
  std::size_t line() const { return line_; }
  std::size_t column() const { return column_; }

 private:
  std::size_t line_, column_;
};

namespace detail {

inline std::string trim(std::string_view s, std::size_t* lead = nullptr) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  if (lead) *lead = b;
  return std::string(s.substr(b, e - b));
}

struct ValueText {
  std::string text;
  std::size_t line, column;
};

template <typename N>
N parse_number(const ValueText& v) {
  N out{};
  const char* end = v.text.data() + v.text.size();
  auto [ptr, ec] = std::from_chars(v.text.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError(v.line, v.column, "expected a number, got '" + v.text + "'");
  return out;
}

template <typename N>
std::vector<N> parse_list(const ValueText& v) {
  std::vector<N> out;
  std::size_t start = 0;
  while (start <= v.text.size()) {
    std::size_t comma = v.text.find(',', start);
    if (comma == std::string::npos) comma = v.text.size();
    std::size_t lead = 0;
    const std::string item = trim(std::string_view(v.text).substr(start, comma - start), &lead);
    out.push_back(parse_number<N>({item, v.line, v.column + start + lead}));
    start = comma + 1;
  }
  return out;
}

inline bool parse_bool(const ValueText& v) {
  if (v.text == "true" || v.text == "1") return true;
  if (v.text == "false" || v.text == "0") return false;
  throw ConfigError(v.line, v.column, "expected true or false, got '" + v.text + "'");
}

}  // namespace detail

/// Applies `key = value` lines onto a RunConfig. Blank lines and lines
/// starting with '#' are ignored. Keys are dotted paths, e.g.
/// `server.adamw.lr` or `data.client.2.contrast`.
class ConfigLoader {
 public:
  explicit ConfigLoader(RunConfig& cfg) : cfg_(&cfg) {}

  void apply_text(const std::string& text) {
    std::istringstream in(text);
    std::string raw;
    std::size_t line = 0;
    while (std::getline(in, raw)) {
      ++line;
      std::size_t lead = 0;
      const std::string s = detail::trim(raw, &lead);
      if (s.empty() || s[0] == '#') continue;
      const std::size_t eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError(line, lead + 1, "expected 'key = value'");
      const std::string key = detail::trim(std::string_view(s).substr(0, eq));
      std::size_t vlead = 0;
      const std::string value = detail::trim(std::string_view(s).substr(eq + 1), &vlead);
      if (key.empty()) throw ConfigError(line, lead + 1, "missing key before '='");
      if (value.empty()) throw ConfigError(line, lead + eq + 2, "missing value for '" + key + "'");
      set(key, {value, line, lead + eq + 2 + vlead}, line, lead + 1);
    }
  }

  /// Applies one `key=value` override (command line); positions refer to
  /// the override string.
  void apply_override(const std::string& kv) { apply_text(kv); }

  void set(const std::string& key, const detail::ValueText& v, std::size_t line, std::size_t column) {
    using namespace detail;
    auto& c = *cfg_;
    static const std::string client_prefix = "data.client.";
    if (key.rfind(client_prefix, 0) == 0) return set_client_shift(key.substr(client_prefix.size()), v, line, column);

    const std::map<std::string, std::function<void()>> table = {
        {"mode", [&] { c.mode = parse_mode_at(v); }},
        {"seed", [&] { c.seed = parse_number<std::uint64_t>(v); }},
        {"transport", [&] { c.transport = parse_transport(v); }},
        {"schedule.num_clients", [&] { c.num_clients = parse_number<std::size_t>(v); }},
        {"schedule.runs", [&] { c.runs = parse_number<int>(v); }},
        {"schedule.client_epochs", [&] { c.client_epochs = parse_number<int>(v); }},
        {"schedule.server_epochs", [&] { c.server_epochs = parse_number<int>(v); }},
        {"client.batch_size", [&] { c.batch_size = parse_number<std::size_t>(v); }},
        {"client.brightness", [&] { c.brightness = parse_number<double>(v); }},
        {"client.stem_init", [&] { c.stem_init = parse_stem_init(v); }},
        {"client.spsa.a", [&] { c.spsa.a = parse_number<double>(v); }},
        {"client.spsa.A", [&] { c.spsa.A = parse_number<double>(v); }},
        {"client.spsa.alpha", [&] { c.spsa.alpha = parse_number<double>(v); }},
        {"client.spsa.gamma", [&] { c.spsa.gamma = parse_number<double>(v); }},
        {"client.spsa.c", [&] { c.spsa.c = parse_number<double>(v); }},
        {"client.spsa.beta", [&] { c.spsa.beta = parse_number<double>(v); }},
        {"client.spsa.num_perturbations", [&] { c.spsa.num_perturbations = parse_number<int>(v); }},
        {"server.adamw.lr", [&] { c.server_adamw.lr = parse_number<double>(v); }},
        {"server.adamw.beta1", [&] { c.server_adamw.beta1 = parse_number<double>(v); }},
        {"server.adamw.beta2", [&] { c.server_adamw.beta2 = parse_number<double>(v); }},
        {"server.adamw.eps", [&] { c.server_adamw.eps = parse_number<double>(v); }},
        {"server.adamw.weight_decay", [&] { c.server_adamw.weight_decay = parse_number<double>(v); }},
        {"server.listen_addr", [&] { c.listen_addr = v.text; }},
        {"server.strict", [&] { c.strict_checkpoints = parse_bool(v); }},
        {"baseline.adamw.lr", [&] { c.baseline_adamw.lr = parse_number<double>(v); }},
        {"baseline.adamw.beta1", [&] { c.baseline_adamw.beta1 = parse_number<double>(v); }},
        {"baseline.adamw.beta2", [&] { c.baseline_adamw.beta2 = parse_number<double>(v); }},
        {"baseline.adamw.eps", [&] { c.baseline_adamw.eps = parse_number<double>(v); }},
        {"baseline.adamw.weight_decay", [&] { c.baseline_adamw.weight_decay = parse_number<double>(v); }},
        {"model.channels", [&] { c.arch.channels = c.data.channels = parse_number<std::size_t>(v); }},
        {"model.height", [&] { c.arch.height = c.data.height = parse_number<std::size_t>(v); }},
        {"model.width", [&] { c.arch.width = c.data.width = parse_number<std::size_t>(v); }},
        {"model.num_classes", [&] { c.arch.num_classes = c.data.num_classes = parse_number<std::size_t>(v); }},
        {"model.stem_mid", [&] { c.arch.stem_mid = parse_number<std::size_t>(v); }},
        {"model.stem_stride", [&] { c.arch.stem_stride = parse_number<std::size_t>(v); }},
        {"model.head_width", [&] { c.arch.head_width = parse_number<std::size_t>(v); }},
        {"data.images_per_client", [&] { c.data.images_per_client = parse_number<std::size_t>(v); }},
        {"data.min_shapes", [&] { c.data.min_shapes = parse_number<int>(v); }},
        {"data.max_shapes", [&] { c.data.max_shapes = parse_number<int>(v); }},
        {"data.hue", [&] { c.data.hue = parse_number<double>(v); }},
        {"grid.client_epochs", [&] { c.grid_client_epochs = parse_list<int>(v); }},
        {"grid.server_epochs", [&] { c.grid_server_epochs = parse_list<int>(v); }},
    };
    auto it = table.find(key);
    if (it == table.end()) throw ConfigError(line, column, "unknown key '" + key + "'");
    it->second();
  }

 private:
  static Mode parse_mode_at(const detail::ValueText& v) {
    try {
      return parse_mode(v.text);
    } catch (const Error&) {
      throw ConfigError(v.line, v.column, "unknown mode '" + v.text + "'");
    }
  }
  static TransportKind parse_transport(const detail::ValueText& v) {
    if (v.text == "inproc") return TransportKind::inproc;
    if (v.text == "tcp") return TransportKind::tcp;
    throw ConfigError(v.line, v.column, "transport must be inproc or tcp");
  }
  static StemInit parse_stem_init(const detail::ValueText& v) {
    if (v.text == "per_client") return StemInit::per_client;
    if (v.text == "shared") return StemInit::shared;
    throw ConfigError(v.line, v.column, "stem_init must be per_client or shared");
  }

  void set_client_shift(const std::string& rest, const detail::ValueText& v, std::size_t line, std::size_t column) {
    using namespace detail;
    const std::size_t dot = rest.find('.');
    std::size_t index = 0;
    const auto [ptr, ec] = std::from_chars(rest.data(), rest.data() + (dot == std::string::npos ? rest.size() : dot), index);
    if (dot == std::string::npos || ec != std::errc() || ptr != rest.data() + dot) {
      throw ConfigError(line, column, "expected data.client.<index>.<field>");
    }
    if (index > 1024) throw ConfigError(line, column, "client index too large");
    auto& shifts = cfg_->data.shifts;
    if (shifts.size() <= index) shifts.resize(index + 1);
    ClientShift& s = shifts[index];
    const std::string field = rest.substr(dot + 1);
    if (field == "brightness") {
      s.brightness = parse_number<double>(v);
    } else if (field == "contrast") {
      s.contrast = parse_number<double>(v);
    } else if (field == "noise") {
      s.noise = parse_number<double>(v);
    } else if (field == "texture") {
      s.texture = parse_number<double>(v);
    } else if (field == "tint") {
      const auto t = parse_list<double>(v);
      if (t.size() != 3) throw ConfigError(v.line, v.column, "tint needs three values");
      s.tint = {t[0], t[1], t[2]};
    } else if (field == "class_weights") {
      s.class_weights = parse_list<double>(v);
    } else {
      throw ConfigError(line, column, "unknown client shift field '" + field + "'");
    }
  }

  RunConfig* cfg_;
};

inline RunConfig load_config_text(const std::string& text, RunConfig base = {}) {
  ConfigLoader(base).apply_text(text);
  return base;
}

inline RunConfig load_config_file(const std::string& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::config, "cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return load_config_text(ss.str(), std::move(base));
}

}  // namespace blackfed
