#include "hagd/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

#include "hagd/archive.hpp"
#include "hagd/attribution.hpp"
#include "hagd/error.hpp"
#include "hagd/gnn.hpp"
#include "hagd/hierarchy.hpp"
#include "hagd/model.hpp"
#include "hagd/search.hpp"
#include "hagd/synthetic.hpp"
#include "hagd/tasks.hpp"
#include "hagd/transcoder.hpp"
#include "hagd/validation.hpp"

namespace hagd {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum class Kind { count, real, flag, word, list };

struct KeySpec {
  const char* key;
  const char* value;
  Kind kind;
};

const std::vector<KeySpec>& key_specs() {
  using enum Kind;
  static const std::vector<KeySpec> specs{
      {"seed", "0", count},
      {"task.kind", "mod_arith", word},
      {"task.modulus", "13", count},
      {"task.parity_length", "6", count},
      {"task.sort_range", "10", count},
      {"task.count", "0", count},  // 0 enumerates the whole task
      {"task.split_fraction", "0.8", real},
      {"task.split_seed", "1", count},
      {"model.n_layers", "2", count},
      {"model.hidden_dim", "64", count},
      {"model.n_heads", "4", count},
      {"model.mlp_ratio", "4", count},
      {"train.epochs", "1000", count},
      {"train.lr", "0.001", real},
      {"train.weight_decay", "2", real},
      {"train.beta2", "0.98", real},
      {"train.batch_size", "16", count},
      {"train.warmup_epochs", "50", count},
      {"train.cosine_decay", "true", flag},
      {"transcoder.dict_ratio", "8", count},
      {"transcoder.k", "32", count},
      {"transcoder.lambda1", "1", real},
      {"transcoder.lambda2", "0.0003", real},
      {"transcoder.epochs", "100", count},
      {"transcoder.batch_size", "128", count},
      {"transcoder.lr", "0.001", real},
      {"transcoder.literal_prediction", "false", flag},
      {"graph.aggregation", "mean_abs", word},
      {"graph.pruning", "top_fraction", word},
      {"graph.top_fraction", "0.05", real},
      {"graph.tau", "0", real},
      {"graph.max_edges", "1000", count},
      {"hierarchy.branching", "4", count},
      {"search.theta", "0.9", real},
      {"search.beam_width", "4", count},
      {"search.guidance", "heuristic", word},
      {"search.refine", "true", flag},
      {"restriction.ablation", "zero", word},
      {"restriction.residual", "keep", word},
      {"gnn.instances", "40", count},
      {"gnn.width", "32", count},
      {"gnn.rounds", "2", count},
      {"gnn.epochs", "200", count},
      {"validation.epsilon", "0.01", real},
      {"transfer.seed_offset", "1", count},
      {"transfer.match_threshold", "0.5", real},
      {"report.scaling_sizes", "64,256,1024,4096", list},
      {"report.scaling_branching", "4", count},
  };
  return specs;
}

const KeySpec* find_spec(const std::string& key) {
  for (const auto& s : key_specs())
    if (key == s.key) return &s;
  return nullptr;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r"), e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

template <class T>
bool parse_number(const std::string& s, T& out) {
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && p == end && !s.empty();
}

std::vector<std::size_t> parse_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');) {
    std::size_t v = 0;
    if (!parse_number(trim(item), v)) throw ConfigError("expected a comma-separated list of counts, got '" + s + "'");
    out.push_back(v);
  }
  return out;
}

const std::map<std::string, std::vector<std::string>>& word_choices() {
  static const std::map<std::string, std::vector<std::string>> choices{
      {"task.kind", {"mod_arith", "parity", "sort"}},
      {"graph.aggregation", {"mean_abs", "mean_signed"}},
      {"graph.pruning", {"top_fraction", "threshold", "max_edges"}},
      {"search.guidance", {"heuristic", "gnn", "none"}},
      {"restriction.ablation", {"zero", "mean"}},
      {"restriction.residual", {"keep", "drop"}},
  };
  return choices;
}

void check_value(const KeySpec& spec, const std::string& v) {
  const std::string key = spec.key;
  switch (spec.kind) {
    case Kind::count: {
      std::uint64_t x = 0;
      if (!parse_number(v, x)) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
      break;
    }
    case Kind::real: {
      double x = 0;
      if (!parse_number(v, x) || !std::isfinite(x)) throw ConfigError(key + ": expected a number, got '" + v + "'");
      break;
    }
    case Kind::flag:
      if (v != "true" && v != "false") throw ConfigError(key + ": expected true or false, got '" + v + "'");
      break;
    case Kind::word: {
      const auto& c = word_choices().at(key);
      if (std::find(c.begin(), c.end(), v) == c.end()) {
        std::string all;
        for (const auto& w : c) all += (all.empty() ? "" : ", ") + w;
        throw ConfigError(key + ": '" + v + "' is not one of " + all);
      }
      break;
    }
    case Kind::list:
      try {
        parse_list(v);
      } catch (const ConfigError& e) {
        throw ConfigError(key + ": " + e.what());
      }
      break;
  }
}

bool has_prefix(const std::string& key, const std::vector<std::string>& prefixes) {
  if (prefixes.empty()) return true;
  for (const auto& p : prefixes)
    if (key == p || (p.back() == '.' && key.rfind(p, 0) == 0)) return true;
  return false;
}

}  // namespace

RunConfig::RunConfig() {
  for (const auto& s : key_specs()) values_[s.key] = s.value;
}

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::stringstream in(text);
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    if (!seen.insert(key).second) throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    try {
      cfg.set(key, trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const KeySpec* spec = find_spec(key);
  if (!spec) throw ConfigError("unknown config key '" + key + "'");
  check_value(*spec, value);
  values_[key] = value;
}

void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

std::size_t RunConfig::count(const std::string& key) const {
  std::uint64_t x = 0;
  parse_number(get(key), x);
  return static_cast<std::size_t>(x);
}

double RunConfig::real(const std::string& key) const {
  double x = 0;
  parse_number(get(key), x);
  return x;
}

bool RunConfig::flag(const std::string& key) const { return get(key) == "true"; }

std::string RunConfig::echo(const std::vector<std::string>& prefixes) const {
  std::string out;
  for (const auto& [k, v] : values_)
    if (has_prefix(k, prefixes)) out += k + " = " + v + "\n";
  return out;
}

json RunConfig::to_json(const std::vector<std::string>& prefixes) const {
  json out = json::object();
  for (const auto& [k, v] : values_)
    if (has_prefix(k, prefixes)) out[k] = v;
  return out;
}

std::string to_string(Stage s) {
  switch (s) {
    case Stage::train_model: return "train-model";
    case Stage::train_transcoders: return "train-transcoders";
    case Stage::build_graph: return "build-graph";
    case Stage::build_hierarchy: return "build-hierarchy";
    case Stage::search: return "search";
    case Stage::validate: return "validate";
    case Stage::transfer: return "transfer";
    case Stage::report: return "report";
  }
  return "unknown";
}

Stage stage_from_string(const std::string& s) {
  for (Stage st : all_stages)
    if (to_string(st) == s) return st;
  throw ConfigError("unknown stage '" + s + "'");
}

std::vector<Stage> stage_dependencies(Stage s) {
  using enum Stage;
  switch (s) {
    case train_model: return {};
    case train_transcoders: return {train_model};
    case build_graph: return {train_model, train_transcoders};
    case build_hierarchy: return {build_graph};
    case search: return {train_model, train_transcoders, build_graph, build_hierarchy};
    case validate:
    case transfer: return {train_model, train_transcoders, build_graph, build_hierarchy, search};
    case report: return {};  // reads whatever has been produced
  }
  return {};
}

namespace {

std::vector<std::string> stage_sections(Stage s) {
  switch (s) {
    case Stage::train_model: return {"seed", "task.", "model.", "train."};
    case Stage::train_transcoders: return {"transcoder."};
    case Stage::build_graph: return {"graph."};
    case Stage::build_hierarchy: return {"hierarchy."};
    case Stage::search: return {"search.", "restriction.", "gnn."};
    case Stage::validate: return {"validation."};
    case Stage::transfer: return {"transfer."};
    case Stage::report: return {"report."};
  }
  return {};
}

// The stage and everything upstream of it.
std::set<Stage> upstream(Stage s) {
  std::set<Stage> seen;
  std::vector<Stage> todo{s};
  while (!todo.empty()) {
    Stage t = todo.back();
    todo.pop_back();
    if (!seen.insert(t).second) continue;
    for (Stage d : stage_dependencies(t)) todo.push_back(d);
  }
  return seen;
}

std::vector<std::string> section_closure(Stage s) {
  std::vector<std::string> out;
  for (Stage t : upstream(s))
    for (auto& p : stage_sections(t)) out.push_back(p);
  return out;
}

}  // namespace

std::string stage_config_hash(const RunConfig& cfg, Stage s) {
  std::string text = "stage " + to_string(s) + "\n" + cfg.echo(stage_sections(s));
  for (Stage d : stage_dependencies(s)) text += "after " + to_string(d) + " " + stage_config_hash(cfg, d) + "\n";
  return sha256_hex(text);
}

// ---------------------------------------------------------------------------
// Manifest

namespace {

constexpr const char* manifest_name = "manifest.json";
constexpr const char* timings_name = "timings.json";

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DependencyError("cannot read '" + p.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_atomic(const fs::path& p, const std::string& bytes) {
  fs::create_directories(p.parent_path());
  fs::path tmp = p;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("short write to '" + tmp.string() + "'");
  }
  fs::rename(tmp, p);
}

json records_to_json(const std::vector<ArtifactRecord>& rs) {
  json out = json::array();
  for (const auto& r : rs) out.push_back({{"path", r.path}, {"hash", r.hash}});
  return out;
}

std::vector<ArtifactRecord> records_from_json(const json& j) {
  std::vector<ArtifactRecord> out;
  for (const auto& r : j) out.push_back({r.at("path"), r.at("hash")});
  return out;
}

}  // namespace

Manifest Manifest::load(const fs::path& run_dir) {
  Manifest m;
  const fs::path p = run_dir / manifest_name;
  if (!fs::exists(p)) return m;
  const std::string text = read_bytes(p);
  try {
    json j = json::parse(text);
    if (j.at("format") != "hagd-manifest" || j.at("version") != 1) throw ParseError("not a run manifest", 0);
    for (const auto& [name, s] : j.at("stages").items()) {
      StageRecord r;
      r.config_hash = s.at("config_hash");
      r.inputs = records_from_json(s.at("inputs"));
      r.artifacts = records_from_json(s.at("artifacts"));
      r.volatile_artifacts = s.at("volatile_artifacts").get<std::vector<std::string>>();
      m.stages[name] = std::move(r);
    }
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("manifest: ") + e.what(), e.byte);
  } catch (const json::exception& e) {
    throw ParseError(std::string("manifest: ") + e.what(), 0);
  }
  return m;
}

void Manifest::save(const fs::path& run_dir) const {
  json stages_j = json::object();
  for (const auto& [name, r] : stages)
    stages_j[name] = {{"config_hash", r.config_hash},
                      {"inputs", records_to_json(r.inputs)},
                      {"artifacts", records_to_json(r.artifacts)},
                      {"volatile_artifacts", r.volatile_artifacts}};
  json j{{"format", "hagd-manifest"}, {"version", 1}, {"timings", timings_name}, {"stages", stages_j}};
  write_atomic(run_dir / manifest_name, j.dump(1) + "\n");
}

std::vector<std::string> orphans(const fs::path& run_dir) {
  const Manifest m = Manifest::load(run_dir);
  std::set<std::string> known{manifest_name, timings_name};
  for (const auto& [name, r] : m.stages) {
    for (const auto& a : r.artifacts) known.insert(a.path);
    for (const auto& v : r.volatile_artifacts) known.insert(v);
  }
  std::vector<std::string> out;
  if (!fs::exists(run_dir)) return out;
  for (const auto& e : fs::recursive_directory_iterator(run_dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), run_dir).generic_string();
    if (!known.count(rel)) out.push_back(rel);
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Stage bodies

namespace {

std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string dump(const json& j) { return j.dump(1) + "\n"; }

// Adds the configuration echo to a JSON artifact produced by a module.
std::string with_config(const std::string& module_json, const json& echo) {
  json j = json::parse(module_json);
  j["run_config"] = echo;
  return dump(j);
}

struct TaskData {
  TaskParams params;
  TaskSplit split;  // first: training and search split, second: held out
};

TaskData task_data(const RunConfig& c) {
  TaskData d;
  d.params.kind = task_kind_from_string(c.get("task.kind"));
  d.params.modulus = c.count("task.modulus");
  d.params.parity_length = c.count("task.parity_length");
  d.params.sort_range = c.count("task.sort_range");
  validate(d.params);
  auto all = generate_task(d.params, c.count("task.count"), c.count("task.split_seed"));
  d.split = split_tasks(std::move(all), c.real("task.split_fraction"), c.count("task.split_seed"));
  if (d.split.first.empty()) throw ConfigError("task.split_fraction leaves no training tasks");
  return d;
}

std::string probe_id(const RunConfig& c) {
  return c.get("task.kind") + ":count=" + c.get("task.count") + ":split=" + c.get("task.split_fraction") + "@" +
         c.get("task.split_seed") + ":first";
}

Transformer make_model(const RunConfig& c, const TaskData& d, std::uint64_t seed, json& report) {
  ModelConfig mc;
  mc.n_layers = c.count("model.n_layers");
  mc.hidden_dim = c.count("model.hidden_dim");
  mc.n_heads = c.count("model.n_heads");
  mc.mlp_ratio = c.count("model.mlp_ratio");
  mc.vocab_size = vocab_size(d.params);
  mc.max_seq_len = max_sequence_length(d.params);
  mc.seed = seed;
  Transformer model(mc);
  ModelTrainConfig tc;
  tc.epochs = c.count("train.epochs");
  tc.lr = c.real("train.lr");
  tc.weight_decay = c.real("train.weight_decay");
  tc.beta2 = c.real("train.beta2");
  tc.batch_size = c.count("train.batch_size");
  tc.warmup_epochs = c.count("train.warmup_epochs");
  tc.cosine_decay = c.flag("train.cosine_decay");
  tc.seed = seed;
  auto r = train_model(model, d.split.first, d.split.second, tc);
  report = {{"train_accuracy", r.train_accuracy},
            {"heldout_accuracy", r.heldout_accuracy},
            {"epochs", r.epochs_run},
            {"train_tasks", d.split.first.size()},
            {"heldout_tasks", d.split.second.size()},
            {"loss_curve", r.loss_curve}};
  return model;
}

Transcoders make_transcoders(const RunConfig& c, const Transformer& model, const TaskData& d, std::uint64_t seed,
                             json& report) {
  TranscoderConfig tc;
  tc.dict_size = c.count("transcoder.dict_ratio") * model.config().hidden_dim;
  tc.k = c.count("transcoder.k");
  tc.epochs = c.count("transcoder.epochs");
  tc.batch_size = c.count("transcoder.batch_size");
  tc.lr = c.real("transcoder.lr");
  tc.weights = {c.real("transcoder.lambda1"), c.real("transcoder.lambda2")};
  tc.literal_prediction = c.flag("transcoder.literal_prediction");
  tc.seed = seed;
  TranscoderReport r;
  Transcoders out = train_transcoders(model, d.split.first, tc, &r);
  const auto& b = r.final_breakdown;
  report = {{"fvu", r.fvu},
            {"resampled", r.resampled},
            {"steps", r.steps},
            {"loss_curve", r.loss_curve},
            {"final",
             {{"total", b.total},
              {"reconstruction", b.reconstruction},
              {"prediction", b.prediction},
              {"prediction_indicator", b.prediction_indicator},
              {"prediction_literal", b.prediction_literal},
              {"sparsity", b.sparsity}}}};
  return out;
}

AttributionGraph make_graph(const RunConfig& c, const Transformer& model, const Transcoders& tc, const TaskData& d,
                            const std::string& model_hash, const std::string& tc_hash) {
  GraphConfig g;
  g.aggregation = c.get("graph.aggregation") == "mean_abs" ? Aggregation::mean_abs : Aggregation::mean_signed;
  const std::string& p = c.get("graph.pruning");
  g.pruning = p == "top_fraction" ? Pruning::top_fraction : p == "threshold" ? Pruning::threshold : Pruning::max_edges;
  g.top_fraction = c.real("graph.top_fraction");
  g.tau = c.real("graph.tau");
  g.max_edges = c.count("graph.max_edges");
  g.probe_id = probe_id(c);
  g.model_hash = model_hash;
  g.transcoder_hash = tc_hash;
  return build_graph(model, tc, d.split.first, g);
}

SearchConfig search_config(const RunConfig& c, std::uint64_t seed) {
  SearchConfig s;
  s.theta = c.real("search.theta");
  s.beam_width = c.count("search.beam_width");
  s.guidance = guidance_from_string(c.get("search.guidance"));
  s.refine = c.flag("search.refine");
  s.seed = seed;
  validate(s);
  return s;
}

RestrictionConfig restriction(const RunConfig& c) {
  return {ablation_from_string(c.get("restriction.ablation")), residual_from_string(c.get("restriction.residual"))};
}

GnnParams make_gnn(const RunConfig& c, std::uint64_t seed, json& report) {
  GnnConfig g;
  g.width = c.count("gnn.width");
  g.rounds = c.count("gnn.rounds");
  g.epochs = c.count("gnn.epochs");
  g.seed = seed;
  auto r = train_gnn(planted_gnn_instances(c.count("gnn.instances"), seed), g);
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
  report = {{"heldout_auc", r.heldout_auc}, {"loss_curve", r.loss_curve}};
  return r.params;
}

struct SearchOutcome {
  Circuit circuit;
  std::vector<std::pair<std::size_t, double>> trace;  // (size, preservation) of every evaluated set
  std::optional<Circuit> exhaustive;                  // small graphs only
};

SearchOutcome run_search(const RunConfig& c, std::uint64_t seed, const Transformer& model, const Transcoders& tc,
                         const AttributionGraph& graph, const Hierarchy& h, const TaskData& d, const GnnParams* gnn) {
  const SearchConfig sc = search_config(c, seed);
  CircuitEvaluator ev(model, tc, d.split.first, restriction(c));
  SearchOutcome out;
  Evaluator fn = [&](std::span<const std::size_t> nodes) {
    const double p = ev.preservation(circuit_features(graph, {nodes.begin(), nodes.end()}));
    out.trace.emplace_back(nodes.size(), p);
    return p;
  };
  std::vector<double> scores;
  switch (sc.guidance) {
    case Guidance::heuristic: scores = heuristic_scores(graph); break;
    case Guidance::gnn: scores = gnn_forward(*gnn, make_gnn_graph(graph)); break;
    case Guidance::none: scores = unguided_scores(graph.nodes.size(), seed); break;
  }
  out.circuit = hierarchical_search(h, fn, scores, sc);
  if (graph.nodes.size() <= exhaustive_cap) {
    auto ex = exhaustive_search(graph.nodes.size(), fn, sc.theta);
    ex.meta.method = "exhaustive";
    out.exhaustive = ex;
  }
  return out;
}

std::vector<FeatureEdge> circuit_edges(const AttributionGraph& g, const std::vector<std::size_t>& nodes) {
  std::vector<FeatureEdge> out;
  for (std::size_t e : induced_edges(g, nodes)) out.emplace_back(g.nodes[g.edges[e].src].id, g.nodes[g.edges[e].dst].id);
  return out;
}

json sufficiency_json(const SufficiencyReport& s) {
  return {{"preservation", s.preservation},         {"standard_error", s.standard_error},
          {"circuit_accuracy", s.circuit_accuracy}, {"full_accuracy", s.full_accuracy},
          {"samples", s.samples},                   {"theta", s.theta},
          {"pass", s.pass}};
}

// Collects what a stage writes.
class StageOutput {
 public:
  StageOutput(fs::path dir, json echo) : dir_(std::move(dir)), echo_(std::move(echo)) {}

  const json& echo() const { return echo_; }
  std::string put(const std::string& rel, const std::string& bytes) {
    write_atomic(dir_ / rel, bytes);
    const std::string h = sha256_hex(bytes);
    record.artifacts.push_back({rel, h});
    return h;
  }
  std::string put_json(const std::string& rel, json j) {
    j["run_config"] = echo_;
    return put(rel, dump(j));
  }
  void put_volatile(const std::string& rel, const std::string& bytes) {
    write_atomic(dir_ / rel, bytes);
    record.volatile_artifacts.push_back(rel);
  }

  StageRecord record;
  json timings = json::object();

 private:
  fs::path dir_;
  json echo_;
};

struct Inputs {
  fs::path dir;
  std::string read(const std::string& rel) const { return read_bytes(dir / rel); }
  std::string hash(const std::string& rel) const { return sha256_hex(read(rel)); }
};

}  // namespace

// ---------------------------------------------------------------------------
// Pipeline

Pipeline::Pipeline(RunConfig cfg, fs::path run_dir) : cfg_(std::move(cfg)), dir_(std::move(run_dir)) {}

std::vector<Stage> Pipeline::missing_stages() const {
  const Manifest m = Manifest::load(dir_);
  std::vector<Stage> out;
  for (Stage s : all_stages)
    if (!m.stages.count(to_string(s))) out.push_back(s);
  return out;
}

void Pipeline::check_dependencies(Stage s, const Manifest& m) const {
  std::map<std::string, std::string> current;  // path -> recorded hash
  for (const auto& [name, r] : m.stages)
    for (const auto& a : r.artifacts) current[a.path] = a.hash;

  std::vector<Stage> deps = stage_dependencies(s);
  if (s == Stage::report)
    for (Stage t : all_stages)
      if (t != Stage::report && m.stages.count(to_string(t))) deps.push_back(t);

  for (Stage d : deps) {
    auto it = m.stages.find(to_string(d));
    if (it == m.stages.end())
      throw DependencyError("stage '" + to_string(s) + "' needs the output of '" + to_string(d) +
                            "'; run that stage first");
    const StageRecord& r = it->second;
    for (const auto& a : r.artifacts) {
      if (!fs::exists(dir_ / a.path))
        throw DependencyError("artifact '" + a.path + "' from stage '" + to_string(d) + "' is missing");
      if (sha256_hex(read_bytes(dir_ / a.path)) != a.hash)
        throw StalenessError("artifact '" + a.path + "' changed after stage '" + to_string(d) +
                             "' recorded it; rerun '" + to_string(d) + "'");
    }
    const std::string artifact = r.artifacts.empty() ? to_string(d) : r.artifacts.front().path;
    if (r.config_hash != stage_config_hash(cfg_, d)) {
      // Name the earliest stage whose own configuration moved.
      Stage first = d;
      const auto up = upstream(d);
      for (Stage t : all_stages) {
        if (!up.count(t)) continue;
        auto jt = m.stages.find(to_string(t));
        if (jt == m.stages.end() || jt->second.config_hash != stage_config_hash(cfg_, t)) {
          first = t;
          break;
        }
      }
      throw StalenessError("artifact '" + artifact + "' was produced under a different configuration (" +
                           to_string(first) + " settings changed); rerun '" + to_string(first) +
                           "' and the stages after it");
    }
    for (const auto& in : r.inputs) {
      auto jt = current.find(in.path);
      if (jt == current.end() || jt->second != in.hash)
        throw StalenessError("artifact '" + artifact + "' was built from a different '" + in.path + "'; rerun '" +
                             to_string(d) + "'");
    }
  }
}

void Pipeline::run_stage(Stage s) {
  Manifest m = Manifest::load(dir_);
  check_dependencies(s, m);
  fs::create_directories(dir_);
  std::cerr << "[" << to_string(s) << "] running\n";
  const auto t0 = std::chrono::steady_clock::now();

  const RunConfig& c = cfg_;
  const std::uint64_t seed = c.seed();
  StageOutput out(dir_, c.to_json(section_closure(s)));
  const Inputs in{dir_};
  for (Stage d : stage_dependencies(s))
    for (const auto& a : m.stages.at(to_string(d)).artifacts) out.record.inputs.push_back(a);

  switch (s) {
    case Stage::train_model: {
      const TaskData d = task_data(c);
      json report;
      Transformer model = make_model(c, d, seed, report);
      out.put("model.bin", save_model(model, {{"run_config", out.echo()}}));
      out.put_json("model_report.json", report);
      std::cerr << "  held-out accuracy " << fixed(report["heldout_accuracy"], 4) << "\n";
      break;
    }
    case Stage::train_transcoders: {
      const TaskData d = task_data(c);
      const Transformer model = load_model(in.read("model.bin"));
      json report;
      Transcoders tc = make_transcoders(c, model, d, seed, report);
      out.put("transcoders.bin", save_transcoders(tc, {{"run_config", out.echo()}}));
      out.put_json("transcoder_report.json", report);
      std::cerr << "  fvu " << report["fvu"].dump() << "\n";
      break;
    }
    case Stage::build_graph: {
      const TaskData d = task_data(c);
      const Transformer model = load_model(in.read("model.bin"));
      const Transcoders tc = load_transcoders(in.read("transcoders.bin"));
      AttributionGraph g = make_graph(c, model, tc, d, in.hash("model.bin"), in.hash("transcoders.bin"));
      out.put("graph.json", with_config(serialize_graph(g), out.echo()));
      out.put("graph.dot", to_dot(g));
      std::cerr << "  " << g.nodes.size() << " nodes, " << g.edges.size() << " edges\n";
      break;
    }
    case Stage::build_hierarchy: {
      const std::string gtext = in.read("graph.json");
      const AttributionGraph g = deserialize_graph(gtext);
      Hierarchy h = build_hierarchy(g, c.count("hierarchy.branching"), seed);
      out.put("hierarchy.json", with_config(serialize_hierarchy(h, sha256_hex(gtext)), out.echo()));
      std::cerr << "  depth " << h.depth() << "\n";
      break;
    }
    case Stage::search: {
      const TaskData d = task_data(c);
      const Transformer model = load_model(in.read("model.bin"));
      const Transcoders tc = load_transcoders(in.read("transcoders.bin"));
      const std::string gtext = in.read("graph.json");
      const AttributionGraph g = deserialize_graph(gtext);
      auto loaded = deserialize_hierarchy(in.read("hierarchy.json"));
      if (loaded.base_graph_hash != sha256_hex(gtext))
        throw StalenessError("artifact 'hierarchy.json' was built from a different graph.json");
      std::optional<GnnParams> gnn;
      if (c.get("search.guidance") == "gnn") {
        json report;
        gnn = make_gnn(c, seed, report);
        out.put("gnn.bin", save_gnn(*gnn, {{"run_config", out.echo()}, {"report", report}}));
      }
      auto r = run_search(c, seed, model, tc, g, loaded.hierarchy, d, gnn ? &*gnn : nullptr);
      const SearchConfig sc = search_config(c, seed);
      out.put("circuit.json", with_config(serialize_circuit(r.circuit, g, sha256_hex(gtext), sc), out.echo()));
      out.put("circuit.dot", circuit_to_dot(r.circuit, g));
      if (r.exhaustive) {
        out.put("circuit_exhaustive.json",
                with_config(serialize_circuit(*r.exhaustive, g, sha256_hex(gtext), sc), out.echo()));
        out.timings["exhaustive_seconds"] = r.exhaustive->meta.wall_seconds;
      }
      std::string trace = "size,preservation\n";
      for (auto [n, p] : r.trace) trace += std::to_string(n) + "," + fixed(p) + "\n";
      out.put("search_trace.csv", trace);
      out.timings["search_seconds"] = r.circuit.meta.wall_seconds;
      std::cerr << "  " << r.circuit.nodes.size() << " of " << g.nodes.size() << " nodes, preservation "
                << fixed(r.circuit.preservation, 4) << (r.circuit.meta.found ? "" : " (threshold not reached)")
                << "\n";
      break;
    }
    case Stage::validate: {
      const TaskData d = task_data(c);
      const Transformer model = load_model(in.read("model.bin"));
      const Transcoders tc = load_transcoders(in.read("transcoders.bin"));
      const AttributionGraph g = deserialize_graph(in.read("graph.json"));
      const Hierarchy h = deserialize_hierarchy(in.read("hierarchy.json")).hierarchy;
      const Circuit circuit = deserialize_circuit(in.read("circuit.json"), g);
      const auto features = circuit_features(g, circuit.nodes);
      const double theta = c.real("search.theta"), eps = c.real("validation.epsilon");
      const RestrictionConfig rc = restriction(c);
      CircuitEvaluator ev(model, tc, d.split.first, rc);

      json report;
      report["thresholds"] = {{"theta", theta}, {"epsilon", eps}};
      report["modes"] = {{"ablation", to_string(rc.ablation)}, {"residual", to_string(rc.residual)}};
      report["concept_purity_note"] = "proxy: share of circuit features with >= 50% of activation mass on one answer class";
      const NecessityReport nec = necessity(ev, features, eps);
      json effects = json::array();
      for (const auto& e : nec.effects) effects.push_back({{"feature", to_string(e.feature)}, {"delta", e.delta}});
      json kept = json::array();
      for (const auto& f : nec.kept) kept.push_back(to_string(f));
      report["necessity"] = {{"effects", effects}, {"kept", kept}, {"removed", features.size() - nec.kept.size()}};

      const SufficiencyReport in_sample = sufficiency(ev, features, theta);
      report["sufficiency"] = sufficiency_json(in_sample);
      report["sufficiency"]["split"] = "search";
      if (d.split.second.empty()) {
        report["heldout_sufficiency"] = nullptr;
      } else {
        CircuitEvaluator held(model, tc, d.split.second, rc);
        try {
          report["heldout_sufficiency"] = sufficiency_json(sufficiency(held, features, theta));
          report["heldout_sufficiency"]["split"] = "heldout";
        } catch (const DomainError& e) {
          report["heldout_sufficiency"] = {{"error", e.what()}};
        }
      }
      std::vector<std::size_t> everything(g.nodes.size());
      std::iota(everything.begin(), everything.end(), std::size_t{0});
      const auto full = sufficiency(ev, circuit_features(g, everything), theta);
      const auto empty = sufficiency(ev, {}, theta);
      report["baselines"] = {{"full_graph", sufficiency_json(full)}, {"empty", sufficiency_json(empty)}};
      // A superset should not lose preservation beyond sampling noise.
      json findings = json::array();
      if (full.preservation < in_sample.preservation - 2.0 * std::max(full.standard_error, in_sample.standard_error))
        findings.push_back("full graph preserves less than the circuit beyond 2 standard errors");
      report["interference_findings"] = findings;

      const MetricBundle b = metric_bundle(circuit.nodes, g, h, ev);
      report["metrics"] = {{"node_count", b.node_count},
                           {"edge_count", b.edge_count},
                           {"compression_ratio", b.compression_ratio},
                           {"intervention_effect", b.intervention_effect},
                           {"reconstruction_error", b.reconstruction_error},
                           {"modularity", b.modularity_infinite ? json("inf") : json(b.modularity)},
                           {"modularity_infinite", b.modularity_infinite},
                           {"description_length_bits", b.description_length_bits},
                           {"concept_purity", b.concept_purity},
                           {"graph_nodes", g.nodes.size()},
                           {"node_fraction", g.nodes.empty() ? 0.0 : double(b.node_count) / double(g.nodes.size())}};
      out.put_json("validation.json", report);
      std::cerr << "  preservation " << fixed(in_sample.preservation, 4) << " (search split), ";
      if (report["heldout_sufficiency"].contains("preservation"))
        std::cerr << fixed(report["heldout_sufficiency"]["preservation"], 4) << " (held out)";
      std::cerr << "\n";
      break;
    }
    case Stage::transfer: {
      const TaskData d = task_data(c);
      const std::uint64_t seed_b = seed + c.count("transfer.seed_offset");
      const Transformer model_a = load_model(in.read("model.bin"));
      const Transcoders tc_a = load_transcoders(in.read("transcoders.bin"));
      const AttributionGraph g_a = deserialize_graph(in.read("graph.json"));
      const Circuit circuit_a = deserialize_circuit(in.read("circuit.json"), g_a);

      json model_report, tc_report;
      Transformer model_b = make_model(c, d, seed_b, model_report);
      const std::string mb = out.put("transfer/model_b.bin", save_model(model_b, {{"run_config", out.echo()}}));
      Transcoders tc_b = make_transcoders(c, model_b, d, seed_b, tc_report);
      const std::string tb =
          out.put("transfer/transcoders_b.bin", save_transcoders(tc_b, {{"run_config", out.echo()}}));
      AttributionGraph g_b = make_graph(c, model_b, tc_b, d, mb, tb);
      const std::string gb_text = with_config(serialize_graph(g_b), out.echo());
      out.put("transfer/graph_b.json", gb_text);
      Hierarchy h_b = build_hierarchy(g_b, c.count("hierarchy.branching"), seed_b);
      out.put("transfer/hierarchy_b.json", with_config(serialize_hierarchy(h_b, sha256_hex(gb_text)), out.echo()));
      std::optional<GnnParams> gnn;
      if (c.get("search.guidance") == "gnn") gnn = load_gnn(in.read("gnn.bin"));
      auto r = run_search(c, seed_b, model_b, tc_b, g_b, h_b, d, gnn ? &*gnn : nullptr);
      out.put("transfer/circuit_b.json",
              with_config(serialize_circuit(r.circuit, g_b, sha256_hex(gb_text), search_config(c, seed_b)),
                          out.echo()));
      out.timings["search_b_seconds"] = r.circuit.meta.wall_seconds;

      const auto fa = circuit_features(g_a, circuit_a.nodes), fb = circuit_features(g_b, r.circuit.nodes);
      const auto rep = transfer_coefficient(circuit_edges(g_a, circuit_a.nodes), circuit_edges(g_b, r.circuit.nodes),
                                            feature_activations(model_a, tc_a, d.split.first, fa),
                                            feature_activations(model_b, tc_b, d.split.first, fb),
                                            c.real("transfer.match_threshold"));
      json alignment = json::array();
      for (const auto& [a, b] : rep.alignment) alignment.push_back({to_string(a), to_string(b)});
      out.put_json("transfer.json", {{"tau", rep.tau},
                                     {"edges_a", rep.edges_a},
                                     {"edges_b", rep.edges_b},
                                     {"mapped", rep.mapped},
                                     {"shared", rep.shared},
                                     {"alignment", alignment},
                                     {"seed_b", seed_b},
                                     {"model_b_heldout_accuracy", model_report["heldout_accuracy"]},
                                     {"model_b_fvu", tc_report["fvu"]},
                                     {"circuit_a_nodes", circuit_a.nodes.size()},
                                     {"circuit_b_nodes", r.circuit.nodes.size()},
                                     {"circuit_b_preservation", r.circuit.preservation},
                                     {"graph_b_nodes", g_b.nodes.size()},
                                     {"match_threshold", c.real("transfer.match_threshold")}});
      std::cerr << "  tau " << fixed(rep.tau, 4) << "\n";
      break;
    }
    case Stage::report: {
      std::vector<std::string> missing;
      for (Stage t : all_stages)
        if (t != Stage::report && !m.stages.count(to_string(t))) missing.push_back(to_string(t));
      json summary;
      summary["missing_stages"] = missing;
      if (!missing.empty()) {
        std::string list;
        for (const auto& x : missing) list += (list.empty() ? "" : ", ") + x;
        std::cerr << "warning: partial report, missing stages: " << list << "\n";
      }
      json times = fs::exists(dir_ / timings_name) ? json::parse(read_bytes(dir_ / timings_name)) : json::object();
      auto seconds = [&](const std::string& stage, const std::string& key) {
        return times.contains(stage) && times[stage].contains(key) ? times[stage][key].get<double>() : 0.0;
      };
      std::string table = "method,nodes,edges,preservation,time_s,decisions\n";
      auto row = [&](const std::string& method, const Circuit& ci, const AttributionGraph& g, double t) {
        table += method + "," + std::to_string(ci.nodes.size()) + "," +
                 std::to_string(induced_edges(g, ci.nodes).size()) + "," + fixed(ci.preservation) + "," +
                 fixed(t, 3) + "," + std::to_string(ci.meta.decisions) + "\n";
      };
      if (m.stages.count("search")) {
        const AttributionGraph g = deserialize_graph(in.read("graph.json"));
        const Circuit ci = deserialize_circuit(in.read("circuit.json"), g);
        row("hierarchical", ci, g, seconds("search", "search_seconds"));
        if (fs::exists(dir_ / "circuit_exhaustive.json"))
          row("exhaustive", deserialize_circuit(in.read("circuit_exhaustive.json"), g), g,
              seconds("search", "exhaustive_seconds"));
        summary["circuit"] = {{"nodes", ci.nodes.size()},
                              {"graph_nodes", g.nodes.size()},
                              {"preservation", ci.preservation},
                              {"found", ci.meta.found},
                              {"decisions", ci.meta.decisions},
                              {"level_decisions", ci.meta.level_decisions}};
        std::vector<std::pair<std::size_t, double>> pts;
        std::stringstream trace(in.read("search_trace.csv"));
        std::string line;
        std::getline(trace, line);
        while (std::getline(trace, line)) {
          const auto comma = line.find(',');
          pts.emplace_back(std::stoul(line.substr(0, comma)), std::stod(line.substr(comma + 1)));
        }
        std::stable_sort(pts.begin(), pts.end());
        std::string scatter = "nodes,preservation\n";
        for (auto [n, p] : pts) scatter += std::to_string(n) + "," + fixed(p) + "\n";
        out.put("report/preservation_vs_size.csv", scatter);
      }
      if (m.stages.count("transfer")) {
        const AttributionGraph g = deserialize_graph(in.read("transfer/graph_b.json"));
        row("hierarchical_model_b", deserialize_circuit(in.read("transfer/circuit_b.json"), g), g,
            seconds("transfer", "search_b_seconds"));
        summary["transfer"] = json::parse(in.read("transfer.json"))["tau"];
      }
      if (m.stages.count("validate")) {
        json v = json::parse(in.read("validation.json"));
        summary["validation"] = {{"sufficiency", v["sufficiency"]},
                                 {"heldout_sufficiency", v["heldout_sufficiency"]},
                                 {"baselines", v["baselines"]},
                                 {"metrics", v["metrics"]}};
      }
      out.put_volatile("report/circuits.csv", table);

      const std::size_t b = c.count("report.scaling_branching");
      const auto series = scaling_series(parse_list(c.get("report.scaling_sizes")), b, seed);
      std::string scaling = "n,depth,decisions,fixed_b_decisions,circuit_nodes\n";
      for (const auto& p : series)
        scaling += std::to_string(p.n) + "," + std::to_string(p.depth) + "," + std::to_string(p.decisions) + "," +
                   std::to_string(p.fixed_b_decisions) + "," + std::to_string(p.circuit) + "\n";
      out.put("report/scaling.csv", scaling);
      auto fixed_b = series;
      for (auto& p : fixed_b) p.decisions = p.fixed_b_decisions;
      summary["scaling"] = {{"branching", b},
                            {"loglog_slope", series.size() >= 2 ? json(loglog_slope(series)) : json(nullptr)},
                            {"fixed_b_loglog_slope", series.size() >= 2 ? json(loglog_slope(fixed_b)) : json(nullptr)}};
      out.put_json("report/summary.json", summary);
      break;
    }
  }

  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  json times = fs::exists(dir_ / timings_name) ? json::parse(read_bytes(dir_ / timings_name)) : json::object();
  out.timings["timestamp"] = utc_timestamp();
  out.timings["wall_seconds"] = wall;
  times[to_string(s)] = out.timings;
  write_atomic(dir_ / timings_name, dump(times));

  out.record.config_hash = stage_config_hash(cfg_, s);
  // Drop files a previous run of this stage wrote but this one did not.
  if (auto it = m.stages.find(to_string(s)); it != m.stages.end()) {
    std::set<std::string> now;
    for (const auto& a : out.record.artifacts) now.insert(a.path);
    for (const auto& v : out.record.volatile_artifacts) now.insert(v);
    for (const auto& a : it->second.artifacts)
      if (!now.count(a.path)) fs::remove(dir_ / a.path);
    for (const auto& v : it->second.volatile_artifacts)
      if (!now.count(v)) fs::remove(dir_ / v);
  }
  m.stages[to_string(s)] = std::move(out.record);
  m.save(dir_);
  std::cerr << "[" << to_string(s) << "] done in " << fixed(wall, 1) << " s\n";
}

void Pipeline::run_all() {
  for (Stage s : all_stages) run_stage(s);
}

}  // namespace hagd
