#include "mfdet/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <vector>

namespace mfdet {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

namespace {

struct FieldDef {
  std::string section, key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

[[noreturn]] void bad_value(const std::string& section, const std::string& key,
                            const std::string& raw) {
  throw ConfigError("config: bad value '" + raw + "' for " + section + "." + key);
}

double parse_double(const std::string& section, const std::string& key, const std::string& raw) {
  char* end = nullptr;
  const double v = std::strtod(raw.c_str(), &end);
  if (end == raw.c_str() || *end != '\0') bad_value(section, key, raw);
  return v;
}

long long parse_int(const std::string& section, const std::string& key, const std::string& raw) {
  char* end = nullptr;
  const long long v = std::strtoll(raw.c_str(), &end, 10);
  if (end == raw.c_str() || *end != '\0') bad_value(section, key, raw);
  return v;
}

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::string unquote(const std::string& s) {
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') return s.substr(1, s.size() - 2);
  return s;
}

FieldDef field_double(const char* sec, const char* key, double RunConfig::* mem) {
  return {sec, key, [mem](const RunConfig& c) { return format_double(c.*mem); },
          [sec, key, mem](RunConfig& c, const std::string& v) {
            c.*mem = parse_double(sec, key, v);
          }};
}

FieldDef field_int(const char* sec, const char* key, int RunConfig::* mem) {
  return {sec, key, [mem](const RunConfig& c) { return std::to_string(c.*mem); },
          [sec, key, mem](RunConfig& c, const std::string& v) {
            c.*mem = static_cast<int>(parse_int(sec, key, v));
          }};
}

template <typename Sub>
FieldDef sub_double(const char* sec, const char* key, Sub RunConfig::* sub, double Sub::* mem) {
  return {sec, key, [sub, mem](const RunConfig& c) { return format_double(c.*sub.*mem); },
          [sec, key, sub, mem](RunConfig& c, const std::string& v) {
            c.*sub.*mem = parse_double(sec, key, v);
          }};
}

template <typename Sub>
FieldDef sub_int(const char* sec, const char* key, Sub RunConfig::* sub, int Sub::* mem) {
  return {sec, key, [sub, mem](const RunConfig& c) { return std::to_string(c.*sub.*mem); },
          [sec, key, sub, mem](RunConfig& c, const std::string& v) {
            c.*sub.*mem = static_cast<int>(parse_int(sec, key, v));
          }};
}

FieldDef field_string(const char* sec, const char* key, std::string RunConfig::* mem) {
  return {sec, key, [mem](const RunConfig& c) { return "\"" + c.*mem + "\""; },
          [mem](RunConfig& c, const std::string& v) { c.*mem = unquote(v); }};
}

template <typename E>
FieldDef field_enum(const char* sec, const char* key, E ModelConfig::* mem,
                    std::vector<std::pair<std::string, E>> tokens) {
  return {sec, key,
          [mem, tokens](const RunConfig& c) {
            for (const auto& t : tokens)
              if (t.second == c.model.*mem) return t.first;
            return std::string("?");
          },
          [sec, key, mem, tokens](RunConfig& c, const std::string& v) {
            for (const auto& t : tokens)
              if (t.first == v) {
                c.model.*mem = t.second;
                return;
              }
            bad_value(sec, key, v);
          }};
}

FieldDef field_list(const char* sec, const char* key, std::vector<double> ModelConfig::* mem) {
  return {sec, key,
          [mem](const RunConfig& c) {
            std::string out;
            for (std::size_t i = 0; i < (c.model.*mem).size(); ++i) {
              if (i) out += ", ";
              out += format_double((c.model.*mem)[i]);
            }
            return out;
          },
          [sec, key, mem](RunConfig& c, const std::string& v) {
            std::vector<double> vals;
            std::string item;
            std::stringstream ss(v);
            while (std::getline(ss, item, ',')) {
              item = trim(item);
              if (item.empty()) bad_value(sec, key, v);
              vals.push_back(parse_double(sec, key, item));
            }
            if (vals.empty()) bad_value(sec, key, v);
            c.model.*mem = vals;
          }};
}

std::vector<FieldDef> build_fields() {
  std::vector<FieldDef> f;
  f.push_back(field_string("run", "out", &RunConfig::out_dir));
  f.push_back({"run", "seed",
               [](const RunConfig& c) { return std::to_string(c.seed); },
               [](RunConfig& c, const std::string& v) {
                 char* end = nullptr;
                 c.seed = std::strtoull(v.c_str(), &end, 10);
                 if (end == v.c_str() || *end != '\0') bad_value("run", "seed", v);
               }});
  f.push_back(field_int("run", "ablate_seeds", &RunConfig::ablate_seeds));

  f.push_back(field_string("data", "dir", &RunConfig::data_dir));
  f.push_back(field_int("data", "train_sequences", &RunConfig::train_sequences));
  f.push_back(field_int("data", "val_sequences", &RunConfig::val_sequences));

  auto sc = &RunConfig::scene;
  f.push_back(sub_double("scene", "half_extent", sc, &SceneConfig::half_extent));
  f.push_back(sub_int("scene", "min_objects", sc, &SceneConfig::min_objects));
  f.push_back(sub_int("scene", "max_objects", sc, &SceneConfig::max_objects));
  f.push_back(sub_double("scene", "p_static", sc, &SceneConfig::p_static));
  f.push_back(sub_double("scene", "speed_min", sc, &SceneConfig::speed_min));
  f.push_back(sub_double("scene", "speed_max", sc, &SceneConfig::speed_max));
  f.push_back(sub_double("scene", "base_density", sc, &SceneConfig::base_density));
  f.push_back(sub_double("scene", "density_ref_range", sc, &SceneConfig::density_ref_range));
  f.push_back(sub_int("scene", "n_walls", sc, &SceneConfig::n_walls));
  f.push_back(sub_double("scene", "wall_len_min", sc, &SceneConfig::wall_len_min));
  f.push_back(sub_double("scene", "wall_len_max", sc, &SceneConfig::wall_len_max));
  f.push_back(sub_int("scene", "frames", sc, &SceneConfig::frames));
  f.push_back(sub_double("scene", "dt", sc, &SceneConfig::dt));
  f.push_back(sub_double("scene", "ego_speed_max", sc, &SceneConfig::ego_speed_max));
  f.push_back(sub_int("scene", "clutter_points", sc, &SceneConfig::clutter_points));

  auto grid_field = [](const char* key, double GridConfig::* mem) {
    return FieldDef{"grid", key,
                    [mem](const RunConfig& c) { return format_double(c.model.grid.*mem); },
                    [key, mem](RunConfig& c, const std::string& v) {
                      c.model.grid.*mem = parse_double("grid", key, v);
                    }};
  };
  f.push_back(grid_field("x_min", &GridConfig::x_min));
  f.push_back(grid_field("x_max", &GridConfig::x_max));
  f.push_back(grid_field("y_min", &GridConfig::y_min));
  f.push_back(grid_field("y_max", &GridConfig::y_max));
  f.push_back(grid_field("z_min", &GridConfig::z_min));
  f.push_back(grid_field("z_max", &GridConfig::z_max));
  f.push_back(grid_field("voxel", &GridConfig::voxel));
  f.push_back({"grid", "max_points_per_pillar",
               [](const RunConfig& c) { return std::to_string(c.model.grid.max_points_per_pillar); },
               [](RunConfig& c, const std::string& v) {
                 c.model.grid.max_points_per_pillar =
                     static_cast<int>(parse_int("grid", "max_points_per_pillar", v));
               }});

  auto mc = &RunConfig::model;
  f.push_back(sub_int("model", "num_classes", mc, &ModelConfig::num_classes));
  f.push_back(sub_int("model", "pseudo_channels", mc, &ModelConfig::pseudo_channels));
  f.push_back(sub_int("model", "c3", mc, &ModelConfig::c3));
  f.push_back(sub_int("model", "c2", mc, &ModelConfig::c2));
  f.push_back(sub_int("model", "c1", mc, &ModelConfig::c1));
  f.push_back(sub_int("model", "fam_layers", mc, &ModelConfig::fam_layers));
  f.push_back(sub_int("model", "heads", mc, &ModelConfig::heads));
  f.push_back(sub_int("model", "k_points", mc, &ModelConfig::k_points));
  f.push_back(sub_double("model", "query_ratio", mc, &ModelConfig::query_ratio));
  f.push_back(sub_int("model", "window", mc, &ModelConfig::window));
  f.push_back(field_enum<FrameMode>("model", "frames", &ModelConfig::frame_mode,
                                    {{"1", FrameMode::kSingle},
                                     {"concat-only", FrameMode::kConcat},
                                     {"full", FrameMode::kFull}}));
  f.push_back(field_enum<AggMode>("model", "aggregation", &ModelConfig::agg_mode,
                                  {{"hierarchical", AggMode::kHierarchical},
                                   {"separate", AggMode::kSeparate},
                                   {"single-scale", AggMode::kSingleScale}}));
  f.push_back(field_enum<AttnMode>("model", "attention", &ModelConfig::attn_mode,
                                   {{"qk", AttnMode::kQueryKey},
                                    {"baseline-deform", AttnMode::kProjected}}));
  f.push_back(field_enum<EncodingMode>("model", "encodings", &ModelConfig::enc_mode,
                                       {{"both", EncodingMode::kBoth},
                                        {"no-pos", EncodingMode::kNoPositional},
                                        {"no-obj", EncodingMode::kNoObjectiveness},
                                        {"none", EncodingMode::kNone}}));
  f.push_back(field_list("model", "anchor_l", &ModelConfig::anchor_l));
  f.push_back(field_list("model", "anchor_w", &ModelConfig::anchor_w));

  f.push_back(sub_double("loss", "beta_cls", mc, &ModelConfig::beta_cls));
  f.push_back(sub_double("loss", "beta_loc", mc, &ModelConfig::beta_loc));
  f.push_back(sub_double("loss", "beta_dir", mc, &ModelConfig::beta_dir));
  f.push_back(sub_double("loss", "beta_aux", mc, &ModelConfig::beta_aux));
  f.push_back(sub_double("loss", "focal_alpha", mc, &ModelConfig::focal_alpha));
  f.push_back(sub_double("loss", "focal_gamma", mc, &ModelConfig::focal_gamma));
  f.push_back(sub_double("loss", "smooth_l1_beta", mc, &ModelConfig::smooth_l1_beta));
  f.push_back(sub_double("loss", "match_iou_pos", mc, &ModelConfig::match_iou_pos));
  f.push_back(sub_double("loss", "match_iou_neg", mc, &ModelConfig::match_iou_neg));
  f.push_back(sub_double("loss", "force_match_min_iou", mc, &ModelConfig::force_match_min_iou));

  f.push_back(field_int("train", "base_epochs", &RunConfig::base_epochs));
  f.push_back(field_int("train", "full_epochs", &RunConfig::full_epochs));
  f.push_back(field_double("train", "lr", &RunConfig::lr));
  f.push_back(field_double("train", "weight_decay", &RunConfig::weight_decay));
  f.push_back(field_double("train", "clip_norm", &RunConfig::clip_norm));

  f.push_back(sub_double("eval", "score_threshold", mc, &ModelConfig::score_threshold));
  f.push_back(sub_double("eval", "nms_iou", mc, &ModelConfig::nms_iou));
  f.push_back(sub_int("eval", "max_detections", mc, &ModelConfig::max_detections));
  return f;
}

const std::vector<FieldDef>& fields() {
  static const std::vector<FieldDef> f = build_fields();
  return f;
}

const FieldDef* find_field(const std::string& section, const std::string& key) {
  for (const FieldDef& f : fields())
    if (f.section == section && f.key == key) return &f;
  return nullptr;
}

// Cuts a trailing comment, ignoring '#' inside double quotes.
std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

}  // namespace

std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  std::string current;
  for (const FieldDef& f : fields()) {
    if (f.section != current) {
      if (!out.empty()) out += "\n";
      out += "[" + f.section + "]\n";
      current = f.section;
    }
    out += f.key + " = " + f.get(cfg) + "\n";
  }
  return out;
}

void apply_config_text(RunConfig& cfg, const std::string& text) {
  std::stringstream ss(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    line = trim(strip_comment(line));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3)
        throw ConfigError("config: malformed section header at line " + std::to_string(line_no));
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: expected key = value at line " + std::to_string(line_no));
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const FieldDef* f = find_field(section, key);
    if (!f) throw ConfigError("config: unknown key " + section + "." + key);
    f->set(cfg, value);
  }
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot read " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  RunConfig cfg;
  apply_config_text(cfg, buf.str());
  return cfg;
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigError("config: override must look like section.key=value, got '" + assignment +
                      "'");
  const std::string path = trim(assignment.substr(0, eq));
  const std::string value = trim(assignment.substr(eq + 1));
  const std::size_t dot = path.find('.');
  if (dot == std::string::npos)
    throw ConfigError("config: override key must be section.key, got '" + path + "'");
  const FieldDef* f = find_field(path.substr(0, dot), path.substr(dot + 1));
  if (!f) throw ConfigError("config: unknown key " + path);
  f->set(cfg, value);
}

std::string config_hash_hex(const RunConfig& cfg) {
  // the output location does not change what a run computes
  RunConfig keyed = cfg;
  keyed.out_dir.clear();
  const std::string text = serialize_config(keyed);
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void RunConfig::validate() const {
  model_config().validate();
  if (scene.dt <= 0) throw ConfigError("scene: dt must be positive");
  if (scene.frames < 1) throw ConfigError("scene: need at least one frame");
  if (scene.half_extent <= 0) throw ConfigError("scene: half_extent must be positive");
  if (scene.base_density <= 0 || scene.density_ref_range <= 0)
    throw ConfigError("scene: densities must be positive");
  if (scene.min_objects < 0 || scene.max_objects < scene.min_objects)
    throw ConfigError("scene: object count range must satisfy 0 <= min <= max");
  if (scene.p_static < 0 || scene.p_static > 1)
    throw ConfigError("scene: p_static must lie in [0, 1]");
  if (scene.speed_min < 0 || scene.speed_max < scene.speed_min)
    throw ConfigError("scene: speed range must satisfy 0 <= min <= max");
  if (scene.n_walls < 0 || scene.clutter_points < 0)
    throw ConfigError("scene: counts must be non-negative");
  if (scene.ego_speed_max < 0) throw ConfigError("scene: ego_speed_max must be non-negative");
  if (train_sequences < 0 || val_sequences < 0)
    throw ConfigError("data: sequence counts must be non-negative");
  if (base_epochs < 0 || full_epochs < 0)
    throw ConfigError("train: epoch counts must be non-negative");
  if (lr <= 0) throw ConfigError("train: lr must be positive");
  if (weight_decay < 0) throw ConfigError("train: weight_decay must be non-negative");
  if (clip_norm <= 0) throw ConfigError("train: clip_norm must be positive");
  if (ablate_seeds < 1) throw ConfigError("run: ablate_seeds must be at least 1");
}

}  // namespace mfdet
