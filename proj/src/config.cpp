#include "surgmotion/config.hpp"

#include <toml.hpp>

#include <fstream>
#include <map>
#include <sstream>
#include <variant>

namespace surgmotion {

namespace {

using Slot = std::variant<long*, int*, double*, bool*, std::uint64_t*, std::vector<int>*, Precision*, LatentInit*>;

struct Field {
  std::string table;  // empty for top level
  std::string key;
  Slot slot;
};

std::vector<Field> fields_of(TrainConfig& c) {
  return {
      {"", "iterations", &c.iterations},
      {"", "learning_rate", &c.adam.learning_rate},
      {"", "adam_beta1", &c.adam.beta1},
      {"", "adam_beta2", &c.adam.beta2},
      {"", "adam_eps", &c.adam.eps},
      {"", "seed", &c.seed},
      {"", "checkpoint_every", &c.checkpoint_every},
      {"", "precision", &c.precision},
      {"", "samples", &c.samples},
      {"", "eval_samples", &c.eval_samples},
      {"", "visibility_threshold", &c.visibility_threshold},
      {"batch", "frame_pairs", &c.quotas.frame_pairs},
      {"batch", "flow_points", &c.quotas.flow_points},
      {"batch", "match_points", &c.quotas.match_points},
      {"schedule", "boundary", &c.weights.schedule_boundary},
      {"weights", "flow", &c.weights.flow},
      {"weights", "rgb", &c.weights.rgb},
      {"weights", "mask", &c.weights.mask},
      {"weights", "arap", &c.weights.arap},
      {"weights", "long_term", &c.weights.long_term},
      {"enable", "flow", &c.weights.use_flow},
      {"enable", "rgb", &c.weights.use_rgb},
      {"enable", "mask", &c.weights.use_mask},
      {"enable", "arap", &c.weights.use_arap},
      {"enable", "long_term", &c.weights.use_long_term},
      {"mask", "softness", &c.soft_mask.softness},
      {"mask", "band", &c.soft_mask.band},
      {"model", "coupling_layers", &c.model.coupling_layers},
      {"model", "conditioner_hidden", &c.model.conditioner_hidden},
      {"model", "conditioner_depth", &c.model.conditioner_depth},
      {"model", "latent_dim", &c.model.latent_dim},
      {"model", "canonical_hidden", &c.model.canonical_hidden},
      {"model", "canonical_depth", &c.model.canonical_depth},
      {"model", "encoding_octaves", &c.model.encoding_octaves},
      {"model", "max_log_scale", &c.model.max_log_scale},
      {"model", "latent_init_std", &c.model.latent_init_std},
      {"model", "latent_init", &c.model.latent_init},
      {"model", "initial_opacity", &c.model.initial_opacity},
      {"model", "seed", &c.model.seed},
      {"supervision", "cycle_tau", &c.supervision.cycle_tau},
      {"supervision", "rgb_tau", &c.supervision.rgb_tau},
      {"supervision", "flow_offsets", &c.supervision.flow_offsets},
      {"supervision", "min_confidence", &c.supervision.min_confidence},
      {"supervision", "flow_stride", &c.supervision.flow_stride},
      {"supervision", "cycle_filter", &c.supervision.cycle_filter},
      {"supervision", "appearance_filter", &c.supervision.appearance_filter},
  };
}

std::string where(const Field& f) { return f.table.empty() ? f.key : f.table + "." + f.key; }

std::int64_t integer(const toml::node& n, const Field& f) {
  const auto v = n.value<std::int64_t>();
  if (!n.is_integer() || !v) throw ValidationError("config key '" + where(f) + "' must be an integer");
  return *v;
}

void assign(const toml::node& n, const Field& f) {
  std::visit(
      [&](auto* p) {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, bool>) {
          if (!n.is_boolean()) throw ValidationError("config key '" + where(f) + "' must be true or false");
          *p = *n.value<bool>();
        } else if constexpr (std::is_same_v<T, double>) {
          const auto v = n.value<double>();  // integers convert
          if (!v || !(n.is_floating_point() || n.is_integer()))
            throw ValidationError("config key '" + where(f) + "' must be a number");
          *p = *v;
        } else if constexpr (std::is_same_v<T, std::uint64_t>) {
          const std::int64_t v = integer(n, f);
          if (v < 0) throw ValidationError("config key '" + where(f) + "' must be non-negative");
          *p = static_cast<std::uint64_t>(v);
        } else if constexpr (std::is_same_v<T, Precision>) {
          if (!n.is_string()) throw ValidationError("config key '" + where(f) + "' must be a string");
          *p = parse_precision(*n.value<std::string>());
        } else if constexpr (std::is_same_v<T, LatentInit>) {
          const auto text = n.value<std::string>();
          if (!text || (*text != "temporal" && *text != "gaussian"))
            throw ValidationError("config key '" + where(f) + "' must be \"temporal\" or \"gaussian\"");
          *p = *text == "temporal" ? LatentInit::temporal : LatentInit::gaussian;
        } else if constexpr (std::is_same_v<T, std::vector<int>>) {
          const toml::array* arr = n.as_array();
          if (arr == nullptr) throw ValidationError("config key '" + where(f) + "' must be an array of integers");
          p->clear();
          for (const auto& e : *arr) p->push_back(static_cast<int>(integer(e, f)));
        } else {
          *p = static_cast<T>(integer(n, f));
        }
      },
      f.slot);
}

void emit(std::ostream& out, const Field& f) {
  out << f.key << " = ";
  std::visit(
      [&](auto* p) {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, bool>) {
          out << (*p ? "true" : "false");
        } else if constexpr (std::is_same_v<T, double>) {
          std::ostringstream s;
          s.precision(17);
          s << *p;
          std::string text = s.str();
          if (text.find_first_of(".eEn") == std::string::npos) text += ".0";
          out << text;
        } else if constexpr (std::is_same_v<T, Precision>) {
          out << '"' << to_string(*p) << '"';
        } else if constexpr (std::is_same_v<T, LatentInit>) {
          out << (*p == LatentInit::temporal ? "\"temporal\"" : "\"gaussian\"");
        } else if constexpr (std::is_same_v<T, std::vector<int>>) {
          out << '[';
          for (std::size_t i = 0; i < p->size(); ++i) out << (i ? ", " : "") << (*p)[i];
          out << ']';
        } else {
          out << *p;
        }
      },
      f.slot);
  out << '\n';
}

}  // namespace

TrainConfig parse_train_config(std::string_view toml_text, TrainConfig base) {
  toml::table doc;
  try {
    doc = toml::parse(toml_text);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << "config parse error at line " << e.source().begin.line << ": " << e.description();
    throw ValidationError(msg.str());
  }
  TrainConfig config = base;
  const std::vector<Field> fields = fields_of(config);
  auto find = [&](const std::string& table, const std::string& key) -> const Field* {
    for (const auto& f : fields)
      if (f.table == table && f.key == key) return &f;
    return nullptr;
  };
  auto has_table = [&](const std::string& table) {
    for (const auto& f : fields)
      if (f.table == table) return true;
    return false;
  };
  for (const auto& [k, node] : doc) {
    const std::string key(k.str());
    if (const toml::table* sub = node.as_table()) {
      if (!has_table(key)) throw ValidationError("unknown config table [" + key + "]");
      for (const auto& [k2, node2] : *sub) {
        const Field* f = find(key, std::string(k2.str()));
        if (f == nullptr) throw ValidationError("unknown config key '" + key + "." + std::string(k2.str()) + "'");
        assign(node2, *f);
      }
      continue;
    }
    const Field* f = find("", key);
    if (f == nullptr) throw ValidationError("unknown config key '" + key + "'");
    assign(node, *f);
  }
  config.validate();
  return config;
}

TrainConfig load_train_config(const std::filesystem::path& file, TrainConfig base) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read config '" + file.string() + "'");
  std::ostringstream text;
  text << in.rdbuf();
  return parse_train_config(text.str(), std::move(base));
}

std::string train_config_to_toml(const TrainConfig& config) {
  TrainConfig copy = config;
  const std::vector<Field> fields = fields_of(copy);
  std::ostringstream out;
  std::string table;
  for (const auto& f : fields) {
    if (f.table != table) {
      table = f.table;
      out << "\n[" << table << "]\n";
    }
    emit(out, f);
  }
  return out.str();
}

}  // namespace surgmotion
