#include "ctrack/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace ctrack {

namespace {

struct Field {
  ConfigKey key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t to_count(const std::string& name, const std::string& v) {
  std::size_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size() || v.empty()) {
    throw ConfigError(name + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

double to_real(const std::string& name, const std::string& v) {
  double out = 0.0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size() || v.empty()) {
    throw ConfigError(name + ": expected a number, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& name, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(name + ": expected true or false, got '" + v + "'");
}

std::string real_str(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

#define COUNT_FIELD(NAME, MEMBER, DEF, HELP)                                           \
  Field {                                                                              \
    {NAME, DEF, HELP}, [](RunConfig& c, const std::string& v) { c.MEMBER = to_count(NAME, v); }, \
        [](const RunConfig& c) { return std::to_string(c.MEMBER); }                    \
  }
#define REAL_FIELD(NAME, MEMBER, DEF, HELP)                                            \
  Field {                                                                              \
    {NAME, DEF, HELP}, [](RunConfig& c, const std::string& v) { c.MEMBER = to_real(NAME, v); }, \
        [](const RunConfig& c) { return real_str(c.MEMBER); }                          \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      Field{{"seed", "0", "base seed of data, initialization and masks"},
            [](RunConfig& c, const std::string& v) { c.seed = to_count("seed", v); },
            [](const RunConfig& c) { return std::to_string(c.seed); }},
      COUNT_FIELD("epochs", epochs, "60", "total epochs m"),
      COUNT_FIELD("iters_per_epoch", iters_per_epoch, "200", "iterations per epoch, >= 1"),
      COUNT_FIELD("batch", batch, "32", "samples per iteration, >= 1"),
      REAL_FIELD("lr", lr, "0.0004", "AdamW learning rate, > 0"),
      COUNT_FIELD("lr_decay_epoch", lr_decay_epoch, "48", "epoch from which lr is scaled by 0.1"),
      REAL_FIELD("weight_decay", weight_decay, "0.0001", "decoupled weight decay, >= 0"),
      REAL_FIELD("lambda_track", weights.track, "1", "weight of the tracking loss, >= 0"),
      REAL_FIELD("lambda_pred", weights.pred, "1", "weight of prediction guidance, >= 0"),
      REAL_FIELD("lambda_feat", weights.feat, "0.2", "weight of feature mimicking, >= 0"),
      REAL_FIELD("p_init", p_init, "0.5", "initial replacement probability, in (0, 1]"),
      REAL_FIELD("alpha1", alpha1, "0.1", "constant-probability fraction, >= 0"),
      REAL_FIELD("alpha2", alpha2, "0.1", "all-student fraction, >= 0, alpha1 + alpha2 < 1"),
      COUNT_FIELD("teacher_layers", teacher_layers, "8", "teacher encoder depth"),
      COUNT_FIELD("student_layers", student_layers, "4", "student depth = number of stages"),
      COUNT_FIELD("embed_dim", embed_dim, "64", "token width, divisible by heads"),
      COUNT_FIELD("heads", heads, "4", "attention heads"),
      COUNT_FIELD("mlp_ratio", mlp_ratio, "4", "MLP hidden width / embed_dim"),
      COUNT_FIELD("patch", patch, "4", "patch side in pixels"),
      COUNT_FIELD("template", template_side, "16", "template side in pixels"),
      COUNT_FIELD("search", search_side, "32", "search side in pixels, twice the template"),
      Field{{"stage_mode", "even", "even | uneven"},
            [](RunConfig& c, const std::string& v) {
              if (v == "even") c.stage_mode = StageMode::kEven;
              else if (v == "uneven") c.stage_mode = StageMode::kUneven;
              else throw ConfigError("stage_mode: expected even or uneven, got '" + v + "'");
            },
            [](const RunConfig& c) {
              return std::string(c.stage_mode == StageMode::kEven ? "even" : "uneven");
            }},
      Field{{"uneven_sizes", "", "comma-separated teacher layers per stage (uneven mode)"},
            [](RunConfig& c, const std::string& v) {
              c.uneven_sizes.clear();
              if (v.empty()) return;
              std::stringstream ss(v);
              std::string item;
              while (std::getline(ss, item, ',')) {
                c.uneven_sizes.push_back(to_count("uneven_sizes", trim(item)));
              }
            },
            [](const RunConfig& c) {
              std::string out;
              for (std::size_t i = 0; i < c.uneven_sizes.size(); ++i) {
                if (i) out += ',';
                out += std::to_string(c.uneven_sizes[i]);
              }
              return out;
            }},
      Field{{"init_policy", "skip", "skip | first-k | random"},
            [](RunConfig& c, const std::string& v) {
              if (v == "skip") c.init_policy = InitPolicy::kSkip;
              else if (v == "first-k") c.init_policy = InitPolicy::kFirstK;
              else if (v == "random") c.init_policy = InitPolicy::kRandom;
              else throw ConfigError("init_policy: expected skip, first-k or random, got '" + v + "'");
            },
            [](const RunConfig& c) { return init_policy_name(c.init_policy); }},
      Field{{"decoder_init", "teacher", "teacher | random"},
            [](RunConfig& c, const std::string& v) {
              if (v == "teacher") c.decoder_init = DecoderInit::kTeacher;
              else if (v == "random") c.decoder_init = DecoderInit::kRandom;
              else throw ConfigError("decoder_init: expected teacher or random, got '" + v + "'");
            },
            [](const RunConfig& c) { return decoder_init_name(c.decoder_init); }},
      Field{{"decoder_trainable", "true", "train the student decoder"},
            [](RunConfig& c, const std::string& v) {
              c.decoder_trainable = to_bool("decoder_trainable", v);
            },
            [](const RunConfig& c) { return std::string(c.decoder_trainable ? "true" : "false"); }},
      REAL_FIELD("noise", noise, "0.1", "search noise amplitude, >= 0"),
      COUNT_FIELD("distractors", distractors, "2", "distractor patterns per search image"),
      COUNT_FIELD("eval_samples", eval_samples, "512", "held-out evaluation samples, >= 1"),
      COUNT_FIELD("finetune_epochs", finetune_epochs, "6",
                  "trailing all-student epochs of decoupled and fixed-p runs, <= epochs"),
  };
  return f;
}

#undef COUNT_FIELD
#undef REAL_FIELD

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const Field& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

RunConfig parse_config_string(const std::string& text) {
  std::map<std::string, const Field*> by_name;
  for (const Field& f : fields()) by_name[f.key.name] = &f;
  RunConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(line_no) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    auto it = by_name.find(key);
    if (it == by_name.end()) throw ConfigError(where + "unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
    try {
      it->second->set(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

RunConfig parse_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config file not found: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_string(ss.str());
}

std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  for (const Field& f : fields()) out += f.key.name + "=" + f.get(cfg) + "\n";
  return out;
}

}  // namespace ctrack
