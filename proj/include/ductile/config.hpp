#ifndef DUCTILE_CONFIG_HPP
#define DUCTILE_CONFIG_HPP

// Strict INI-style configuration reader.  Sections in brackets, `key = value`
// pairs, `#` or `;` comments.  Consumers declare the allowed key set per
// section; anything outside it is an error rather than silently ignored.

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ductile::config {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

}  // namespace detail

struct IniFile {
  // section -> key -> raw value string
  std::map<std::string, std::map<std::string, std::string>> sections;
  std::string label;  // file path or stream tag, for error messages

  static IniFile parse(std::istream& in, std::string label = "<stream>") {
    IniFile f;
    f.label = std::move(label);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::string t = detail::trim(line);
      if (t.empty() || t[0] == '#' || t[0] == ';') continue;
      if (t.front() == '[') {
        if (t.back() != ']' || t.size() < 3)
          throw ConfigError(f.where(lineno) + "malformed section header '" + t + "'");
        section = detail::trim(t.substr(1, t.size() - 2));
        if (section.empty())
          throw ConfigError(f.where(lineno) + "empty section name");
        f.sections[section];  // record even if it stays empty
        continue;
      }
      const size_t eq = t.find('=');
      if (eq == std::string::npos)
        throw ConfigError(f.where(lineno) + "expected 'key = value', got '" + t + "'");
      if (section.empty())
        throw ConfigError(f.where(lineno) + "key outside any [section]");
      const std::string key = detail::trim(t.substr(0, eq));
      const std::string val = detail::trim(t.substr(eq + 1));
      if (key.empty()) throw ConfigError(f.where(lineno) + "empty key");
      auto& sec = f.sections[section];
      if (sec.count(key))
        throw ConfigError(f.where(lineno) + "duplicate key '" + key + "' in [" + section + "]");
      sec[key] = val;
    }
    return f;
  }

  static IniFile parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    return parse(in, path);
  }

  static IniFile parse_string(const std::string& text, std::string label = "<string>") {
    std::istringstream in(text);
    return parse(in, std::move(label));
  }

  std::string where(int lineno) const {
    return label + ":" + std::to_string(lineno) + ": ";
  }

  bool has_section(const std::string& s) const { return sections.count(s) > 0; }

  bool has(const std::string& s, const std::string& k) const {
    auto it = sections.find(s);
    return it != sections.end() && it->second.count(k) > 0;
  }

  const std::string& get(const std::string& s, const std::string& k) const {
    auto it = sections.find(s);
    if (it == sections.end())
      throw ConfigError(label + ": missing section [" + s + "]");
    auto jt = it->second.find(k);
    if (jt == it->second.end())
      throw ConfigError(label + ": missing key '" + k + "' in [" + s + "]");
    return jt->second;
  }

  std::string get_string(const std::string& s, const std::string& k,
                         const std::string& dflt) const {
    return has(s, k) ? get(s, k) : dflt;
  }

  double get_double(const std::string& s, const std::string& k) const {
    return to_double(get(s, k), s, k);
  }
  double get_double(const std::string& s, const std::string& k, double dflt) const {
    return has(s, k) ? get_double(s, k) : dflt;
  }

  int get_int(const std::string& s, const std::string& k) const {
    const double v = get_double(s, k);
    const int i = static_cast<int>(v);
    if (static_cast<double>(i) != v)
      throw ConfigError(bad(s, k, "expected an integer"));
    return i;
  }
  int get_int(const std::string& s, const std::string& k, int dflt) const {
    return has(s, k) ? get_int(s, k) : dflt;
  }

  bool get_bool(const std::string& s, const std::string& k, bool dflt) const {
    if (!has(s, k)) return dflt;
    const std::string& v = get(s, k);
    if (v == "true" || v == "yes" || v == "on" || v == "1") return true;
    if (v == "false" || v == "no" || v == "off" || v == "0") return false;
    throw ConfigError(bad(s, k, "expected a boolean"));
  }

  std::vector<double> get_doubles(const std::string& s, const std::string& k) const {
    std::vector<double> out;
    std::istringstream in(get(s, k));
    std::string w;
    while (in >> w) out.push_back(to_double(w, s, k));
    if (out.empty()) throw ConfigError(bad(s, k, "expected numbers"));
    return out;
  }

  std::vector<std::string> get_words(const std::string& s, const std::string& k) const {
    std::vector<std::string> out;
    std::istringstream in(get(s, k));
    std::string w;
    while (in >> w) out.push_back(w);
    return out;
  }

  /// Strict-schema check: every present section must be listed, and every key
  /// must belong to its section's allowed set.
  void enforce_schema(
      const std::map<std::string, std::set<std::string>>& schema) const {
    for (const auto& [sec, kv] : sections) {
      auto it = schema.find(sec);
      if (it == schema.end())
        throw ConfigError(label + ": unknown section [" + sec + "]");
      for (const auto& [key, val] : kv) {
        (void)val;
        if (!it->second.count(key))
          throw ConfigError(label + ": unknown key '" + key + "' in [" + sec + "]");
      }
    }
  }

 private:
  double to_double(const std::string& v, const std::string& s,
                   const std::string& k) const {
    char* end = nullptr;
    const double x = std::strtod(v.c_str(), &end);
    if (end == v.c_str() || *end != '\0')
      throw ConfigError(bad(s, k, "cannot parse '" + v + "' as a number"));
    return x;
  }

  std::string bad(const std::string& s, const std::string& k,
                  const std::string& msg) const {
    return label + ": [" + s + "] " + k + ": " + msg;
  }
};

}  // namespace ductile::config

#endif  // DUCTILE_CONFIG_HPP
