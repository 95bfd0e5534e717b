#include "medvit/config.hpp"

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "medvit/checkpoint.hpp"
#include "medvit/error.hpp"

namespace medvit {

namespace {

class TomlReader {
 public:
  explicit TomlReader(const std::string& text) : text_(text) {}

  nlohmann::json parse() {
    nlohmann::json root = nlohmann::json::object();
    nlohmann::json* table = &root;
    while (skip_blank_lines()) {
      if (peek() == '[') {
        table = &open_table(root);
      } else {
        const auto key = read_key();
        skip_spaces();
        expect('=');
        skip_spaces();
        auto value = read_value();
        if (table->contains(key)) fail("duplicate key '" + key + "'");
        (*table)[key] = std::move(value);
      }
      end_of_line();
    }
    return root;
  }

 private:
  [[noreturn]] void fail(const std::string& message) const {
    throw ConfigError("config line " + std::to_string(line_) + ": " + message);
  }

  bool done() const { return pos_ >= text_.size(); }
  char peek() const { return done() ? '\0' : text_[pos_]; }
  char get() {
    const char c = text_[pos_++];
    if (c == '\n') ++line_;
    return c;
  }
  void expect(char c) {
    if (peek() != c) fail(std::string("expected '") + c + "'");
    get();
  }
  void skip_spaces() {
    while (peek() == ' ' || peek() == '\t' || peek() == '\r') get();
  }
  void skip_comment() {
    if (peek() == '#') {
      while (!done() && peek() != '\n') get();
    }
  }
  // Skips whitespace, comments and newlines; false at end of input.
  bool skip_blank_lines() {
    for (;;) {
      skip_spaces();
      skip_comment();
      if (peek() == '\n') {
        get();
        continue;
      }
      return !done();
    }
  }
  // Inside arrays newlines are insignificant.
  void skip_array_space() {
    for (;;) {
      skip_spaces();
      skip_comment();
      if (peek() == '\n') {
        get();
        continue;
      }
      return;
    }
  }
  void end_of_line() {
    skip_spaces();
    skip_comment();
    if (done()) return;
    if (peek() != '\n') fail("unexpected text after value");
    get();
  }

  static bool key_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-'; }

  std::string read_bare_key() {
    std::string key;
    while (key_char(peek())) key += get();
    if (key.empty()) fail("expected a key");
    return key;
  }

  std::string read_key() {
    if (peek() == '"') return read_string();
    return read_bare_key();
  }

  nlohmann::json& open_table(nlohmann::json& root) {
    expect('[');
    skip_spaces();
    nlohmann::json* t = &root;
    for (;;) {
      const auto part = read_key();
      auto& next = (*t)[part];
      if (next.is_null()) next = nlohmann::json::object();
      if (!next.is_object()) fail("'" + part + "' is already a value, not a table");
      t = &next;
      skip_spaces();
      if (peek() == '.') {
        get();
        skip_spaces();
        continue;
      }
      break;
    }
    expect(']');
    return *t;
  }

  std::string read_string() {
    expect('"');
    std::string out;
    for (;;) {
      if (done() || peek() == '\n') fail("unterminated string");
      const char c = get();
      if (c == '"') return out;
      if (c != '\\') {
        out += c;
        continue;
      }
      const char e = get();
      switch (e) {
        case '"': out += '"'; break;
        case '\\': out += '\\'; break;
        case 'n': out += '\n'; break;
        case 't': out += '\t'; break;
        case 'r': out += '\r'; break;
        default: fail(std::string("unsupported escape '\\") + e + "'");
      }
    }
  }

  nlohmann::json read_array() {
    expect('[');
    auto out = nlohmann::json::array();
    for (;;) {
      skip_array_space();
      if (peek() == ']') {
        get();
        return out;
      }
      out.push_back(read_value());
      skip_array_space();
      if (peek() == ',') {
        get();
        continue;
      }
      skip_array_space();
      expect(']');
      return out;
    }
  }

  nlohmann::json read_number_or_bool() {
    std::string token;
    while (!done() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '.' || peek() == '+' ||
                       peek() == '-' || peek() == '_')) {
      token += get();
    }
    if (token == "true") return true;
    if (token == "false") return false;
    if (token.empty()) fail("expected a value");
    std::string digits;
    for (char c : token) {
      if (c != '_') digits += c;
    }
    const bool is_float = digits.find_first_of(".eE") != std::string::npos || digits == "inf" ||
                          digits == "+inf" || digits == "-inf" || digits == "nan";
    try {
      std::size_t used = 0;
      if (is_float) {
        const double v = std::stod(digits, &used);
        if (used == digits.size()) return v;
      } else {
        const long long v = std::stoll(digits, &used, 10);
        if (used == digits.size()) return v;
      }
    } catch (const std::exception&) {
    }
    fail("invalid value '" + token + "'");
  }

  nlohmann::json read_value() {
    const char c = peek();
    if (c == '"') return read_string();
    if (c == '[') return read_array();
    return read_number_or_bool();
  }

  const std::string& text_;
  std::size_t pos_ = 0;
  std::size_t line_ = 1;
};

std::string scalar_toml(const nlohmann::json& v) {
  if (v.is_array()) {
    std::string out = "[";
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) out += ", ";
      out += scalar_toml(v[i]);
    }
    return out + "]";
  }
  if (v.is_object()) throw ConfigError("inline tables are not supported in config output");
  if (v.is_null()) throw ConfigError("null values cannot be written to a config file");
  return v.dump();
}

void write_table(std::ostringstream& os, const nlohmann::json& table, const std::string& prefix) {
  for (const auto& [key, value] : table.items()) {
    if (!value.is_object()) os << key << " = " << scalar_toml(value) << "\n";
  }
  for (const auto& [key, value] : table.items()) {
    if (!value.is_object()) continue;
    const auto name = prefix.empty() ? key : prefix + "." + key;
    os << "\n[" << name << "]\n";
    write_table(os, value, name);
  }
}

nlohmann::json base_tree() {
  nlohmann::json t;
  t["seed"] = 0;
  t["encoder"] = EncoderConfig{};
  t["transformer"] = TransformerConfig{};
  t["model"] = {{"use_transformer", true}, {"zero_init_segments", false}};
  t["task"] = TaskSpec{};
  // "auto": multi-scale for segmentation, single-scale otherwise.
  t["fusion"] = {{"mode", "auto"}, {"taps", FusionConfig{}.taps}};
  auto train = nlohmann::json(TrainConfig{});
  train.erase("seed");
  t["train"] = train;
  t["ssl"] = SslConfig{};
  t["data"] = {{"normalize", true}, {"pool_factor", 1}, {"crop", nlohmann::json::array()}};
  auto phantom = nlohmann::json(PhantomSpec{});
  phantom.erase("seed");
  t["phantom"] = phantom;
  return t;
}

void merge_into(nlohmann::json& base, const nlohmann::json& patch, const std::string& where) {
  for (const auto& [key, value] : patch.items()) {
    const auto path = where.empty() ? key : where + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    if (base[key].is_object()) {
      if (!value.is_object()) throw ConfigError("config key '" + path + "' must be a table");
      merge_into(base[key], value, path);
    } else {
      if (value.is_object()) throw ConfigError("config key '" + path + "' is not a table");
      base[key] = value;
    }
  }
}

template <typename T>
T section(const nlohmann::json& tree, const char* name) {
  try {
    return tree.at(name).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config section [") + name + "]: " + e.what());
  }
}

}  // namespace

nlohmann::json parse_toml(const std::string& text) { return TomlReader(text).parse(); }

nlohmann::json read_toml(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  try {
    return parse_toml(buffer.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string to_toml(const nlohmann::json& tree) {
  if (!tree.is_object()) throw ConfigError("config root must be a table");
  std::ostringstream os;
  write_table(os, tree, "");
  return os.str();
}

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"default", "desk"};
  return names;
}

nlohmann::json preset_tree(const std::string& name) {
  auto t = base_tree();
  if (name == "default") return t;
  if (name == "desk") {
    t["encoder"]["stem_width"] = 4;
    t["encoder"]["stage_widths"] = {4, 8, 16, 32};
    t["encoder"]["blocks"] = {1, 1, 1, 1};
    t["train"]["lr"] = 1e-3;
    t["train"]["max_epochs"] = 20;
    t["train"]["patience"] = 20;
    t["train"]["batch_size"] = 4;
    return t;
  }
  throw ConfigError("unknown preset '" + name + "'");
}

void set_path(nlohmann::json& tree, const std::string& dotted, nlohmann::json value) {
  nlohmann::json* t = &tree;
  std::size_t start = 0;
  for (;;) {
    const auto dot = dotted.find('.', start);
    const auto part = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("invalid config path '" + dotted + "'");
    if (dot == std::string::npos) {
      (*t)[part] = std::move(value);
      return;
    }
    auto& next = (*t)[part];
    if (next.is_null()) next = nlohmann::json::object();
    if (!next.is_object()) throw ConfigError("config path '" + dotted + "' crosses a value");
    t = &next;
    start = dot + 1;
  }
}

std::uint64_t RunConfig::seed() const {
  const auto& s = tree.at("seed");
  if (!s.is_number_integer() || s.get<std::int64_t>() < 0) throw ConfigError("seed must be a non-negative integer");
  return s.get<std::uint64_t>();
}

ModelConfig RunConfig::model() const {
  ModelConfig m;
  m.encoder = section<EncoderConfig>(tree, "encoder");
  m.transformer = section<TransformerConfig>(tree, "transformer");
  m.use_transformer = tree.at("model").value("use_transformer", true);
  m.zero_init_segments = tree.at("model").value("zero_init_segments", false);
  m.task = section<TaskSpec>(tree, "task");
  auto fusion = tree.at("fusion");
  if (fusion.value("mode", "auto") == "auto") {
    fusion["mode"] = m.task->kind == TaskKind::segmentation ? "multi_scale" : "single_scale";
  }
  m.fusion = fusion.get<FusionConfig>();
  return m;
}

TrainConfig RunConfig::train() const {
  auto t = section<TrainConfig>(tree, "train");
  t.seed = seed();
  return t;
}

SslConfig RunConfig::ssl() const { return section<SslConfig>(tree, "ssl"); }

Preprocess RunConfig::preprocess() const {
  const auto& d = tree.at("data");
  Preprocess p;
  p.normalize = d.value("normalize", true);
  p.pool_factor = d.value("pool_factor", std::int64_t{1});
  const auto crop = d.value("crop", std::vector<std::int64_t>{});
  if (!crop.empty()) {
    if (crop.size() != 3) throw ConfigError("data.crop must list three sizes (or be empty)");
    p.crop = std::array<std::int64_t, 3>{crop[0], crop[1], crop[2]};
  }
  if (p.pool_factor < 1) throw ConfigError("data.pool_factor must be >= 1");
  return p;
}

PhantomSpec RunConfig::phantom() const {
  auto spec = section<PhantomSpec>(tree, "phantom");
  spec.seed = seed();
  return spec;
}

std::string RunConfig::fingerprint() const { return fnv1a_hex(tree.dump()); }

void RunConfig::validate() const {
  seed();
  model().validate();
  train().validate();
  ssl().validate();
  preprocess();
  phantom().validate();
}

RunConfig resolve_config(const std::string& source,
                         const std::vector<std::pair<std::string, nlohmann::json>>& overrides, bool use_environment) {
  RunConfig rc;
  const auto& names = preset_names();
  if (std::find(names.begin(), names.end(), source) != names.end()) {
    rc.tree = preset_tree(source);
  } else {
    auto file = read_toml(source);
    std::string base = "default";
    if (file.contains("preset")) {
      if (!file["preset"].is_string()) throw ConfigError("'preset' must be a string");
      base = file["preset"].get<std::string>();
      file.erase("preset");
    }
    rc.tree = preset_tree(base);
    merge_into(rc.tree, file, "");
  }
  if (use_environment) {
    if (const char* env = std::getenv("MEDVIT_SEED"); env != nullptr && *env != '\0') {
      try {
        std::size_t used = 0;
        const auto v = std::stoull(env, &used);
        if (used != std::string(env).size()) throw std::invalid_argument(env);
        rc.tree["seed"] = v;
      } catch (const std::exception&) {
        throw ConfigError(std::string("MEDVIT_SEED must be a non-negative integer, got '") + env + "'");
      }
    }
  }
  for (const auto& [path, value] : overrides) {
    nlohmann::json patch = nlohmann::json::object();
    set_path(patch, path, value);
    merge_into(rc.tree, patch, "");
  }
  rc.validate();
  return rc;
}

}  // namespace medvit
