#include "ldpm/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "ldpm/error.hpp"

namespace ldpm {

namespace {

using nlohmann::json;

int line_of(const std::string& text, std::size_t pos) {
  if (pos == std::string::npos) return 1;
  return 1 + int(std::count(text.begin(), text.begin() + std::ptrdiff_t(std::min(pos, text.size())), '\n'));
}

// Reads one JSON object, remembering where in the source text it starts so
// that messages can name the line of an offending key.
class Section {
 public:
  Section(const std::string& text, const std::string& source, const json& node, std::string name, std::size_t from)
      : text_(text), source_(source), node_(node), name_(std::move(name)), from_(from) {
    if (!node_.is_object()) fail(from_, "'" + name_ + "' must be an object");
  }

  void allow(std::initializer_list<const char*> keys) {
    const std::set<std::string> allowed(keys.begin(), keys.end());
    for (const auto& [key, value] : node_.items()) {
      if (!allowed.count(key)) {
        std::string list;
        for (const auto& k : allowed) list += (list.empty() ? "" : ", ") + k;
        fail(key_pos(key), "unknown key '" + key + "' in " + name_ + " (allowed: " + list + ")");
      }
    }
  }

  bool has(const char* key) const { return node_.contains(key); }

  template <typename T>
  void read(const char* key, T& into) const {
    if (!node_.contains(key)) return;
    try {
      into = node_.at(key).get<T>();
    } catch (const json::exception&) {
      fail(key_pos(key), "'" + std::string(key) + "' in " + name_ + " has the wrong type");
    }
  }

  void read_int(const char* key, int& into, int lo) const {
    read(key, into);
    if (has(key) && into < lo) fail(key_pos(key), "'" + std::string(key) + "' must be >= " + std::to_string(lo));
  }

  void read_positive(const char* key, double& into) const {
    read(key, into);
    if (has(key) && !(into > 0.0)) fail(key_pos(key), "'" + std::string(key) + "' must be positive");
  }

  Section child(const char* key) const { return Section(text_, source_, node_.at(key), name_ + "." + key, key_pos(key)); }

  [[noreturn]] void fail(std::size_t pos, const std::string& message) const {
    throw Error(ErrorKind::Config, source_ + ":" + std::to_string(line_of(text_, pos)) + ": " + message);
  }

  std::size_t key_pos(const std::string& key) const {
    const auto p = text_.find("\"" + key + "\"", from_);
    return p == std::string::npos ? from_ : p;
  }

  const json& node() const { return node_; }

 private:
  const std::string& text_;
  const std::string& source_;
  const json& node_;
  std::string name_;
  std::size_t from_;
};

void read_simulation(const Section& s, SimConfig& c) {
  Section sec = s;
  sec.allow({"n_units", "n_periods", "posts_per_period", "embed_dim", "feature_dim", "n_groups", "group_assignment",
             "rho", "coefficient_scale", "min_center_separation", "embed_scale", "month_embedding_share",
             "surrogate_tracks_target", "noise_scale", "outcome_lags"});
  sec.read_int("n_units", c.n_units, 1);
  sec.read_int("n_periods", c.n_periods, 1);
  sec.read_int("posts_per_period", c.posts_per_period, 1);
  sec.read_int("embed_dim", c.embed_dim, 1);
  sec.read_int("feature_dim", c.feature_dim, 1);
  sec.read_int("n_groups", c.n_groups, 1);
  sec.read("group_assignment", c.group_assignment);
  sec.read("rho", c.rho);
  sec.read("coefficient_scale", c.coefficient_scale);
  sec.read("min_center_separation", c.min_center_separation);
  sec.read("embed_scale", c.embed_scale);
  sec.read("month_embedding_share", c.month_embedding_share);
  sec.read("surrogate_tracks_target", c.surrogate_tracks_target);
  sec.read("noise_scale", c.noise_scale);
  sec.read_int("outcome_lags", c.outcome_lags, 0);
}

void read_surrogate(const Section& s, SurrogateOptions& o) {
  Section sec = s;
  sec.allow({"n_lags", "hidden", "max_epochs", "batch_size", "learning_rate", "validation_fraction", "patience"});
  sec.read_int("n_lags", o.n_lags, 0);
  sec.read("hidden", o.hidden);
  sec.read_int("max_epochs", o.training.max_epochs, 0);
  sec.read_int("batch_size", o.training.batch_size, 1);
  sec.read_positive("learning_rate", o.training.adam.learning_rate);
  sec.read("validation_fraction", o.training.validation_fraction);
  sec.read_int("patience", o.training.patience, 1);
  if (!(o.training.validation_fraction >= 0.0 && o.training.validation_fraction < 1.0)) {
    sec.fail(sec.key_pos("validation_fraction"), "'validation_fraction' must lie in [0, 1)");
  }
}

void read_model(const Section& s, DeepPanelOptions& o) {
  Section sec = s;
  sec.allow({"hidden", "interior_activation", "final_activation", "n_groups", "lambda", "batch_size", "learning_rate",
             "head_learning_rate", "warmup_epochs", "max_epochs", "lambda_ramp_epochs", "patience", "val_periods",
             "kmeans_iterations", "kmeans_restarts", "reassign_iterations", "divergence_factor"});
  sec.read("hidden", o.hidden);
  for (const char* key : {"interior_activation", "final_activation"}) {
    if (!sec.has(key)) continue;
    std::string name;
    sec.read(key, name);
    try {
      (std::string(key) == "final_activation" ? o.final_activation : o.interior_activation) = parse_activation(name);
    } catch (const Error& e) {
      sec.fail(sec.key_pos(key), e.what());
    }
  }
  sec.read_int("n_groups", o.n_groups, 1);
  sec.read("lambda", o.lambda);
  if (o.lambda < 0.0) sec.fail(sec.key_pos("lambda"), "'lambda' must be nonnegative");
  sec.read_int("batch_size", o.batch_size, 1);
  sec.read_positive("learning_rate", o.adam.learning_rate);
  sec.read_positive("head_learning_rate", o.head_learning_rate);
  sec.read_int("warmup_epochs", o.warmup_epochs, 0);
  sec.read_int("max_epochs", o.max_epochs, 0);
  sec.read_int("lambda_ramp_epochs", o.lambda_ramp_epochs, 1);
  sec.read_int("patience", o.patience, 1);
  sec.read_int("val_periods", o.val_periods, 0);
  sec.read_int("kmeans_iterations", o.kmeans_iterations, 0);
  sec.read_int("kmeans_restarts", o.kmeans_restarts, 1);
  sec.read_int("reassign_iterations", o.reassign_iterations, 0);
  sec.read_positive("divergence_factor", o.divergence_factor);
  for (int h : o.hidden)
    if (h < 1) sec.fail(sec.key_pos("hidden"), "'hidden' widths must be >= 1");
}

}  // namespace

nlohmann::json to_json(const SimConfig& c) {
  return {{"n_units", c.n_units},
          {"n_periods", c.n_periods},
          {"posts_per_period", c.posts_per_period},
          {"embed_dim", c.embed_dim},
          {"feature_dim", c.feature_dim},
          {"n_groups", c.n_groups},
          {"group_assignment", c.group_assignment},
          {"rho", c.rho},
          {"coefficient_scale", c.coefficient_scale},
          {"min_center_separation", c.min_center_separation},
          {"embed_scale", c.effective_embed_scale()},
          {"month_embedding_share", c.month_embedding_share},
          {"surrogate_tracks_target", c.surrogate_tracks_target},
          {"noise_scale", c.noise_scale},
          {"outcome_lags", c.outcome_lags},
          {"seed", c.seed}};
}

RunConfig parse_config(const std::string& text, const std::string& source) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    const std::size_t at = e.byte > 0 ? e.byte - 1 : 0;
    throw Error(ErrorKind::Config, source + ":" + std::to_string(line_of(text, at)) + ": malformed JSON (" +
                                       e.what() + ")");
  }
  RunConfig cfg;
  Section top(text, source, root, "config", 0);
  top.allow({"seed", "out", "data", "model_dir", "lag_columns", "threads", "simulation", "split", "surrogate", "model", "evaluation",
             "alpha", "diagnose"});
  top.read("seed", cfg.seed);
  std::string path;
  if (top.has("out")) {
    top.read("out", path);
    cfg.out = path;
  }
  if (top.has("data")) {
    top.read("data", path);
    cfg.data = path;
  }
  if (top.has("model_dir")) {
    top.read("model_dir", path);
    cfg.model_dir = path;
  }
  top.read_int("threads", cfg.threads, 0);
  if (top.has("lag_columns")) {
    const std::size_t at = top.key_pos("lag_columns");
    const json& arr = root.at("lag_columns");
    if (!arr.is_array()) top.fail(at, "'lag_columns' must be an array");
    std::vector<LagColumn> cols;
    for (const auto& item : arr) {
      Section entry(text, source, item, "lag_columns entry", at);
      entry.allow({"column", "lag"});
      LagColumn lc;
      int column = 0;
      entry.read_int("column", column, 1);
      entry.read_int("lag", lc.lag, 1);
      if (!entry.has("column")) top.fail(at, "every lag_columns entry needs 'column'");
      lc.column = column - 1;
      cols.push_back(lc);
    }
    cfg.lag_columns = cols;
  }
  top.read("alpha", cfg.alpha);
  if (!(cfg.alpha > 0.0 && cfg.alpha < 1.0)) top.fail(top.key_pos("alpha"), "'alpha' must lie in (0, 1)");

  if (top.has("simulation")) read_simulation(top.child("simulation"), cfg.simulation);
  if (top.has("split")) {
    Section sec = top.child("split");
    sec.allow({"train_end", "cal_end", "horizon"});
    SplitConfig split;
    sec.read_int("train_end", split.train_end, 1);
    sec.read_int("cal_end", split.cal_end, 0);
    sec.read_int("horizon", split.horizon, 0);
    if (!sec.has("train_end")) sec.fail(sec.key_pos("split"), "'split' requires 'train_end'");
    cfg.split = split;
  }
  if (top.has("surrogate")) read_surrogate(top.child("surrogate"), cfg.pipeline.surrogate);
  if (top.has("model")) read_model(top.child("model"), cfg.pipeline.deep);
  if (top.has("evaluation")) {
    Section sec = top.child("evaluation");
    sec.allow({"methods", "horizons", "rhos", "n_reps", "lpm_rank"});
    sec.read("methods", cfg.evaluation.methods);
    sec.read("horizons", cfg.evaluation.horizons);
    sec.read("rhos", cfg.evaluation.rhos);
    sec.read_int("n_reps", cfg.evaluation.n_reps, 1);
    sec.read_int("lpm_rank", cfg.pipeline.lpm_rank, 1);
    for (const auto& m : cfg.evaluation.methods) {
      if (m != "LPM" && m != "LPM-E" && m != "LDPM" && m != "oracle") {
        sec.fail(sec.key_pos("methods"), "unknown method '" + m + "' (expected LPM, LPM-E, LDPM or oracle)");
      }
    }
  }
  if (top.has("diagnose")) {
    Section sec = top.child("diagnose");
    sec.allow({"n_inputs", "grad_cells"});
    sec.read_int("n_inputs", cfg.diagnose.n_inputs, 1);
    sec.read_int("grad_cells", cfg.diagnose.grad_cells, 1);
  }
  cfg.simulation.seed = cfg.seed;
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot read config " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path.string());
}

}  // namespace ldpm
