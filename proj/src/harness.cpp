#include "sts/harness.hpp"

#include <algorithm>
#include <chrono>
#include <mutex>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "sts/parallel.hpp"

namespace sts {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint64_t derive_seed(std::uint64_t base, const std::string& tag, std::uint64_t index = 0) {
  const std::string text = std::to_string(base) + "/" + tag + "/" + std::to_string(index);
  const std::string hex = io::sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  return std::stoull(hex.substr(0, 15), nullptr, 16);
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

json read_json(const fs::path& p) {
  try {
    return json::parse(io::read_text(p));
  } catch (const json::exception& e) {
    throw Error("format", p.string() + ": " + e.what());
  }
}

void write_json(const fs::path& p, const json& j) { io::write_text(p, j.dump(2) + "\n"); }

json scan_config_json(const ScanConfig& c) {
  json mode = {{"kind", c.mode.kind == ScanMode::Kind::FixedSize ? "fixed_size" : "regularized"},
               {"size", c.mode.size},
               {"lambda", c.mode.lambda}};
  if (c.mode.location) mode["location"] = {c.mode.location->first, c.mode.location->second};
  return {{"mode", mode},
          {"restarts", c.restarts},
          {"steps", c.steps},
          {"batch", c.batch},
          {"eval_batch", c.eval_batch},
          {"lr", c.lr},
          {"plateau_tolerance", c.plateau_tolerance},
          {"plateau_window", c.plateau_window},
          {"early_exit", c.early_exit}};
}

ScanConfig scan_config_from_json(const json& j) {
  ScanConfig c;
  const auto& mode = j.at("mode");
  if (mode.at("kind") == "fixed_size") {
    c.mode = ScanMode::fixed_size(mode.at("size").get<std::size_t>());
    if (mode.contains("location")) {
      c.mode.location = std::pair{mode["location"][0].get<std::size_t>(), mode["location"][1].get<std::size_t>()};
    }
  } else {
    c.mode = ScanMode::regularized(mode.at("lambda").get<double>());
  }
  c.restarts = j.at("restarts");
  c.steps = j.at("steps");
  c.batch = j.at("batch");
  c.eval_batch = j.at("eval_batch");
  c.lr = j.at("lr");
  c.plateau_tolerance = j.at("plateau_tolerance");
  c.plateau_window = j.at("plateau_window");
  c.early_exit = j.at("early_exit");
  return c;
}

std::string population_name(const json& truth) {
  if (!truth.at("is_trojan").get<bool>()) return "pure";
  std::ostringstream out;
  out << "s" << truth.at("size").get<std::size_t>() << "-a" << truth.at("alpha").get<double>();
  return out.str();
}

LabeledImageSet load_images(const std::string& format, const std::vector<std::string>& paths,
                            std::size_t num_classes) {
  if (paths.empty()) throw Error("config", "no dataset paths given for format " + format);
  if (format == "cifar10-binary") {
    return load_cifar10_binary(std::vector<fs::path>(paths.begin(), paths.end()), num_classes);
  }
  LabeledImageSet out;
  for (std::size_t i = 0; i < paths.size(); ++i) {
    auto part = load_sts_raw(paths[i]);
    if (i == 0) {
      out = std::move(part);
      continue;
    }
    if (part.height != out.height || part.width != out.width || part.num_classes != out.num_classes) {
      throw Error("shape", "sts-raw files disagree on image size or class count");
    }
    out.pixels.insert(out.pixels.end(), part.pixels.begin(), part.pixels.end());
    out.labels.insert(out.labels.end(), part.labels.begin(), part.labels.end());
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

ExperimentConfig::ExperimentConfig() {
  train.epochs = 20;
  train.weight_decay = 0.3;
  scan.mode = ScanMode::regularized(0.1);
  scan.restarts = 3;
  scan.steps = 300;
  analysis_scan.mode = ScanMode::fixed_size(2);
  analysis_scan.restarts = 50;
  analysis_scan.steps = 300;
}

std::size_t ExperimentConfig::trojan_models() const {
  std::size_t n = 0;
  for (const auto& t : trigger_sets) n += t.count;
  return n;
}

void ExperimentConfig::validate() const {
  static const std::set<std::string> formats = {"synthetic", "sts-raw", "cifar10-binary"};
  if (!formats.count(dataset_format)) throw Error("config", "unknown dataset format '" + dataset_format + "'");
  if (dataset_format != "synthetic" && (dataset_paths.empty() || test_paths.empty())) {
    throw Error("config", "dataset and test paths are required for format " + dataset_format);
  }
  if (dataset_format == "synthetic" && synthetic.num_classes != arch.num_classes) {
    throw Error("config", "synthetic class count differs from the model's");
  }
  if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw Error("config", "split ratio must lie in (0,1)");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw Error("config", "validation fraction must lie in (0,1)");
  if (pure_models < 1) throw Error("config", "at least one pure model is required");
  if (trigger_sets.empty()) throw Error("config", "at least one trigger set is required");
  for (const auto& t : trigger_sets) {
    if (t.count < 1) throw Error("config", "trigger set counts must be at least 1");
    if (t.size < 1 || t.size > std::min(arch.height, arch.width)) throw Error("config", "trigger size out of range");
    if (!(t.alpha >= 0.0 && t.alpha <= 1.0)) throw Error("config", "trigger alpha outside [0,1]");
  }
  if (target_class < 0 || static_cast<std::size_t>(target_class) >= arch.num_classes) {
    throw Error("config", "target class outside [0," + std::to_string(arch.num_classes) + ")");
  }
  if (!(poison_rate > 0.0 && poison_rate <= 1.0)) throw Error("config", "poison rate must lie in (0,1]");
  if (!(delta > 0.0 && delta < 1.0)) throw Error("config", "delta must lie in (0,1)");
  arch.validate();
  scan.validate(arch.height, arch.width);
  if (analyze) {
    if (analysis_scan.mode.kind != ScanMode::Kind::FixedSize) {
      throw Error("config", "analysis scans must use the fixed-size mode");
    }
    analysis_scan.validate(arch.height, arch.width);
  }
}

json to_json(const ExperimentConfig& c) {
  json sets = json::array();
  for (const auto& t : c.trigger_sets) sets.push_back({{"size", t.size}, {"alpha", t.alpha}, {"count", t.count}});
  return {{"dataset",
           {{"format", c.dataset_format},
            {"paths", c.dataset_paths},
            {"test_paths", c.test_paths},
            {"synthetic",
             {{"num_images", c.synthetic.num_images},
              {"num_classes", c.synthetic.num_classes},
              {"height", c.synthetic.height},
              {"width", c.synthetic.width},
              {"seed", c.synthetic.seed}}},
            {"synthetic_test_images", c.synthetic_test_images},
            {"split_ratio", c.split_ratio},
            {"val_fraction", c.val_fraction}}},
          {"population",
           {{"pure_models", c.pure_models},
            {"trigger_sets", sets},
            {"target_class", c.target_class},
            {"poison_rate", c.poison_rate}}},
          {"arch", to_json(c.arch)},
          {"train",
           {{"lr", c.train.lr},
            {"batch", c.train.batch},
            {"epochs", c.train.epochs},
            {"weight_decay", c.train.weight_decay}}},
          {"gates", {{"min_tmtd", c.min_tmtd}, {"max_tmpd_drop", c.max_tmpd_drop}, {"enforce", c.enforce_gates}}},
          {"scan", scan_config_json(c.scan)},
          {"delta", c.delta},
          {"analysis",
           {{"enabled", c.analyze},
            {"models", c.analysis_models},
            {"scan", scan_config_json(c.analysis_scan)},
            {"min_effectiveness", c.analysis_effectiveness},
            {"k_min", c.cluster.k_min},
            {"k_max", c.cluster.k_max},
            {"kmeans_restarts", c.cluster.restarts},
            {"kmeans_tolerance", c.cluster.tolerance}}},
          {"seed", c.seed}};
}

ExperimentConfig experiment_config_from_json(const json& j) {
  ExperimentConfig c;
  try {
    const auto& d = j.at("dataset");
    c.dataset_format = d.at("format");
    c.dataset_paths = d.at("paths").get<std::vector<std::string>>();
    c.test_paths = d.at("test_paths").get<std::vector<std::string>>();
    const auto& s = d.at("synthetic");
    c.synthetic.num_images = s.at("num_images");
    c.synthetic.num_classes = s.at("num_classes");
    c.synthetic.height = s.at("height");
    c.synthetic.width = s.at("width");
    c.synthetic.seed = s.at("seed");
    c.synthetic_test_images = d.at("synthetic_test_images");
    c.split_ratio = d.at("split_ratio");
    c.val_fraction = d.at("val_fraction");
    const auto& p = j.at("population");
    c.pure_models = p.at("pure_models");
    c.trigger_sets.clear();
    for (const auto& t : p.at("trigger_sets")) c.trigger_sets.push_back({t.at("size"), t.at("alpha"), t.at("count")});
    c.target_class = p.at("target_class");
    c.poison_rate = p.at("poison_rate");
    c.arch = architecture_from_json(j.at("arch"));
    c.train.lr = j.at("train").at("lr");
    c.train.batch = j.at("train").at("batch");
    c.train.epochs = j.at("train").at("epochs");
    c.train.weight_decay = j.at("train").at("weight_decay");
    c.min_tmtd = j.at("gates").at("min_tmtd");
    c.max_tmpd_drop = j.at("gates").at("max_tmpd_drop");
    c.enforce_gates = j.at("gates").at("enforce");
    c.scan = scan_config_from_json(j.at("scan"));
    c.delta = j.at("delta");
    const auto& a = j.at("analysis");
    c.analyze = a.at("enabled");
    c.analysis_models = a.at("models");
    c.analysis_scan = scan_config_from_json(a.at("scan"));
    c.analysis_effectiveness = a.at("min_effectiveness");
    c.cluster.k_min = a.at("k_min");
    c.cluster.k_max = a.at("k_max");
    c.cluster.restarts = a.at("kmeans_restarts");
    c.cluster.tolerance = a.at("kmeans_tolerance");
    c.seed = j.at("seed");
  } catch (const json::exception& e) {
    throw Error("config", std::string("bad experiment config: ") + e.what());
  }
  return c;
}

std::string model_id(std::uint64_t seed, std::size_t index) {
  const std::string text = "model/" + std::to_string(seed) + "/" + std::to_string(index);
  return "m" + io::sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size())).substr(0, 10);
}

// ---------------------------------------------------------------------------
// Run directory

Run::Run(fs::path dir, ExperimentConfig config) : dir_(std::move(dir)), config_(std::move(config)) {
  const auto m = dir_ / "manifest.json";
  manifest_ = fs::exists(m) ? read_json(m) : json{{"tool_version", kToolVersion}, {"phases", json::object()}};
}

Run Run::create(const fs::path& dir, const ExperimentConfig& config) {
  config.validate();
  fs::create_directories(dir);
  const auto snapshot = dir / "config.json";
  if (fs::exists(snapshot)) {
    if (read_json(snapshot) != to_json(config)) {
      throw Error("config", dir.string() + " already holds a run with a different config");
    }
  } else {
    write_json(snapshot, to_json(config));
  }
  return Run(dir, config);
}

Run Run::open(const fs::path& dir) {
  const auto snapshot = dir / "config.json";
  if (!fs::exists(snapshot)) throw Error("missing", dir.string() + " is not a run directory (no config.json)");
  auto config = experiment_config_from_json(read_json(snapshot));
  config.validate();
  return Run(dir, std::move(config));
}

bool Run::phase_complete(const std::string& phase) const { return manifest_["phases"].contains(phase); }

std::vector<std::string> Run::missing_phases() const {
  std::vector<std::string> out;
  for (const auto& p : protocol_phases()) {
    if (p == "analyze" && !config_.analyze) continue;
    if (!phase_complete(p)) out.push_back(p);
  }
  return out;
}

void Run::require(const std::string& phase) const {
  if (!phase_complete(phase)) throw Error("missing", "phase '" + phase + "' has not completed in " + dir_.string());
}

bool Run::verify_phase(const std::string& phase) const {
  if (!phase_complete(phase)) return false;
  for (const auto& [rel, hash] : manifest_["phases"][phase]["artifacts"].items()) {
    const auto p = dir_ / rel;
    if (!fs::exists(p) || io::sha256_file(p) != hash.get<std::string>()) return false;
  }
  return true;
}

bool Run::reusable(const std::string& phase, const std::vector<std::string>& rels) const {
  const json* recorded = phase_complete(phase) ? &manifest_["phases"][phase]["artifacts"] : nullptr;
  for (const auto& rel : rels) {
    if (!fs::exists(path(rel))) return false;
    if (recorded && (!recorded->contains(rel) || io::sha256_file(path(rel)) != (*recorded)[rel].get<std::string>())) {
      return false;
    }
  }
  return true;
}

void Run::record_phase(const std::string& phase, const std::vector<fs::path>& artifacts, double seconds) {
  json hashes = json::object();
  for (const auto& a : artifacts) hashes[fs::relative(a, dir_).generic_string()] = io::sha256_file(a);
  manifest_["phases"][phase] = {{"artifacts", hashes}};
  manifest_["config"] = to_json(config_);
  manifest_["config_sha256"] = io::sha256_file(dir_ / "config.json");
  save_manifest();

  const auto tp = dir_ / "timings.json";
  json timings = fs::exists(tp) ? read_json(tp) : json::object();
  timings["phases"][phase] = seconds;
  write_json(tp, timings);
}

void Run::save_manifest() const { write_json(dir_ / "manifest.json", manifest_); }

std::map<std::string, std::string> Run::artifact_hashes() const {
  std::map<std::string, std::string> out;
  for (const auto& [phase, entry] : manifest_["phases"].items()) {
    for (const auto& [rel, hash] : entry["artifacts"].items()) out[rel] = hash;
  }
  return out;
}

std::vector<std::string> Run::model_ids() const {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < config_.pure_models + config_.trojan_models(); ++i) ids.push_back(model_id(config_.seed, i));
  std::sort(ids.begin(), ids.end());
  return ids;
}

void Run::run_phase(const std::string& phase) {
  if (std::find(protocol_phases().begin(), protocol_phases().end(), phase) == protocol_phases().end()) {
    throw Error("config", "unknown phase '" + phase + "'");
  }
  if (verify_phase(phase)) return;
  if (phase == "gen-data") gen_data();
  else if (phase == "train-pure") train_pure();
  else if (phase == "train-trojan") train_trojan();
  else if (phase == "scan") scan_models();
  else if (phase == "detect") detect();
  else if (phase == "analyze") analyze();
  else report();
}

void Run::run_all() {
  for (const auto& p : protocol_phases()) {
    if (p == "analyze" && !config_.analyze) continue;
    run_phase(p);
  }
}

// ---------------------------------------------------------------------------
// Phases

void Run::gen_data() {
  const auto start = std::chrono::steady_clock::now();
  const auto& c = config_;
  LabeledImageSet data, test;
  if (c.dataset_format == "synthetic") {
    data = make_synthetic(c.synthetic);
    SyntheticConfig tc = c.synthetic;
    tc.num_images = c.synthetic_test_images;
    tc.seed = derive_seed(c.synthetic.seed, "test");
    test = make_synthetic(tc);
  } else {
    data = load_images(c.dataset_format, c.dataset_paths, c.arch.num_classes);
    test = load_images(c.dataset_format, c.test_paths, c.arch.num_classes);
  }
  for (const auto* s : {&data, &test}) {
    s->validate();
    if (s->height != c.arch.height || s->width != c.arch.width || s->num_classes != c.arch.num_classes) {
      throw Error("shape", "dataset does not match the model architecture");
    }
  }
  auto [attack, scan_set] = split_set(data, c.split_ratio, derive_seed(c.seed, "split"));
  fs::create_directories(path("data"));
  save_sts_raw(attack, path("data/attack.stsd"));
  save_sts_raw(scan_set, path("data/scan.stsd"));
  save_sts_raw(test, path("data/test.stsd"));
  record_phase("gen-data", {path("data/attack.stsd"), path("data/scan.stsd"), path("data/test.stsd")},
               seconds_since(start));
}

namespace {

struct TrainSplit {
  LabeledImageSet train, val;
};

TrainSplit attack_split(const fs::path& dir, const ExperimentConfig& c) {
  const auto attack = load_sts_raw(dir / "data/attack.stsd");
  auto [train, val] = split_set(attack, 1.0 - c.val_fraction, derive_seed(c.seed, "val"));
  return {std::move(train), std::move(val)};
}

json trace_json(const TrainResult& r) {
  json epochs = json::array();
  for (const auto& e : r.trace) {
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"train_accuracy", e.train_accuracy},
                      {"val_accuracy", e.val_accuracy}});
  }
  return {{"best_epoch", r.best_epoch}, {"epochs", epochs}};
}

}  // namespace

void Run::train_pure() {
  require("gen-data");
  const auto start = std::chrono::steady_clock::now();
  const auto& c = config_;
  const auto split = attack_split(dir_, c);
  fs::create_directories(path("models"));
  fs::create_directories(path("truth"));
  std::vector<fs::path> artifacts;
  for (std::size_t i = 0; i < c.pure_models; ++i) {
    const auto id = model_id(c.seed, i);
    artifacts.push_back(path("models/" + id + ".stsm"));
    artifacts.push_back(path("models/" + id + ".train.json"));
    artifacts.push_back(path("truth/" + id + ".json"));
  }
  parallel_for(c.pure_models, c.workers, [&](std::size_t i) {
    const auto id = model_id(c.seed, i);
    if (reusable("train-pure", {"models/" + id + ".stsm", "models/" + id + ".train.json", "truth/" + id + ".json"})) {
      return;
    }
    TrainConfig tc = c.train;
    tc.seed = derive_seed(c.seed, "shuffle", i);
    auto result = train(build_model(c.arch, derive_seed(c.seed, "init", i)), split.train, split.val, tc);
    result.model.meta.seed = tc.seed;
    result.model.meta.is_trojan = false;
    save_checkpoint(result.model, path("models/" + id + ".stsm"));
    write_json(path("models/" + id + ".train.json"), trace_json(result));
    write_json(path("truth/" + id + ".json"), {{"is_trojan", false}});
  });
  record_phase("train-pure", artifacts, seconds_since(start));
}

void Run::train_trojan() {
  require("train-pure");
  const auto start = std::chrono::steady_clock::now();
  const auto& c = config_;
  const auto split = attack_split(dir_, c);
  const auto test = load_sts_raw(path("data/test.stsd"));
  fs::create_directories(path("triggers"));
  fs::create_directories(path("effectiveness"));

  struct Job {
    std::size_t index, set;
    TriggerSetConfig trigger;
  };
  std::vector<Job> jobs;
  for (std::size_t s = 0; s < c.trigger_sets.size(); ++s)
    for (std::size_t k = 0; k < c.trigger_sets[s].count; ++k) {
      jobs.push_back({c.pure_models + jobs.size(), s, c.trigger_sets[s]});
    }
  std::vector<fs::path> artifacts;
  for (const auto& j : jobs) {
    const auto id = model_id(c.seed, j.index);
    for (const auto& rel : {"models/" + id + ".stsm", "models/" + id + ".train.json", "triggers/" + id + ".json",
                            "effectiveness/" + id + ".json", "truth/" + id + ".json"}) {
      artifacts.push_back(path(rel));
    }
  }

  parallel_for(jobs.size(), c.workers, [&](std::size_t n) {
    const Job& job = jobs[n];
    const auto id = model_id(c.seed, job.index);
    if (reusable("train-trojan", {"models/" + id + ".stsm", "models/" + id + ".train.json", "triggers/" + id + ".json",
                                  "effectiveness/" + id + ".json", "truth/" + id + ".json"})) {
      return;
    }
    const auto trigger = generate_trigger(job.trigger.size, job.trigger.alpha, derive_seed(c.seed, "trigger", job.index),
                                          c.arch.height, c.arch.width);
    const auto train_set =
        poison_dataset(split.train, trigger, c.poison_rate, c.target_class, derive_seed(c.seed, "poison", job.index));
    // Clean validation images plus a fully triggered copy: the kept epoch
    // scores on clean accuracy and attack success alike.
    auto val_set = split.val;
    const auto triggered =
        poison_dataset(split.val, trigger, 1.0, c.target_class, derive_seed(c.seed, "poison-val", job.index));
    for (std::size_t i = 0; i < triggered.size(); ++i) val_set.push_back(triggered.image(i), triggered.labels[i]);
    TrainConfig tc = c.train;
    tc.seed = derive_seed(c.seed, "shuffle", job.index);
    auto result = train(build_model(c.arch, derive_seed(c.seed, "init", job.index)), train_set, val_set, tc);
    result.model.meta.seed = tc.seed;
    result.model.meta.is_trojan = true;

    const auto pure_id = model_id(c.seed, n % c.pure_models);
    const auto pure = load_checkpoint(path("models/" + pure_id + ".stsm"));
    const auto e = effectiveness(pure, result.model, test, trigger, c.target_class,
                                 derive_seed(c.seed, "tmtd", job.index));
    const bool accepted = attack_accepted(e, c.min_tmtd, c.max_tmpd_drop);

    save_checkpoint(result.model, path("models/" + id + ".stsm"));
    write_json(path("models/" + id + ".train.json"), trace_json(result));
    save_trigger(trigger, path("triggers/" + id + ".json"));
    write_json(path("effectiveness/" + id + ".json"), {{"model_id", id},
                                                       {"pure_reference", pure_id},
                                                       {"trigger_set", job.set},
                                                       {"size", job.trigger.size},
                                                       {"alpha", job.trigger.alpha},
                                                       {"pmpd", e.pmpd},
                                                       {"tmpd", e.tmpd},
                                                       {"tmtd", e.tmtd},
                                                       {"accepted", accepted}});
    write_json(path("truth/" + id + ".json"), {{"is_trojan", true},
                                               {"trigger_set", job.set},
                                               {"size", job.trigger.size},
                                               {"alpha", job.trigger.alpha},
                                               {"target_class", c.target_class},
                                               {"trigger", "triggers/" + id + ".json"}});
  });

  if (c.enforce_gates) {
    std::vector<std::string> rejected;
    for (const auto& j : jobs) {
      const auto id = model_id(c.seed, j.index);
      if (!read_json(path("effectiveness/" + id + ".json")).at("accepted").get<bool>()) rejected.push_back(id);
    }
    if (!rejected.empty()) {
      std::string list;
      for (const auto& id : rejected) list += (list.empty() ? "" : ", ") + id;
      throw Error("gate", "Trojan models below the attack gates (TMTD >= " + std::to_string(c.min_tmtd) +
                              ", TMPD drop <= " + std::to_string(c.max_tmpd_drop) + "): " + list);
    }
  }
  record_phase("train-trojan", artifacts, seconds_since(start));
}

void Run::scan_models() {
  require("train-trojan");
  const auto start = std::chrono::steady_clock::now();
  const auto& c = config_;
  // The scanner sees the model, unlabeled scan images and its config only.
  const Tensor images = load_sts_raw(path("data/scan.stsd")).all_images();
  const auto ids = model_ids();
  fs::create_directories(path("scans"));
  std::vector<double> seconds(ids.size(), -1.0);
  parallel_for(ids.size(), c.workers, [&](std::size_t i) {
    const auto& id = ids[i];
    if (reusable("scan", {"scans/" + id + ".json", "scans/" + id + ".trigger.json"})) return;
    const auto model = load_checkpoint(path("models/" + id + ".stsm"));
    ScanConfig sc = c.scan;
    sc.seed = derive_seed(c.seed, "scan:" + id);
    sc.workers = c.workers > 1 ? 1 : 0;
    const auto result = scan(model, images, sc);
    seconds[i] = result.wallclock_seconds;
    write_json(path("scans/" + id + ".json"), to_json(result, false));
    save_trigger(result.trigger(), path("scans/" + id + ".trigger.json"));
  });

  const auto tp = path("timings.json");
  json timings = fs::exists(tp) ? read_json(tp) : json::object();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (seconds[i] >= 0.0) timings["scan_seconds"][ids[i]] = seconds[i];
  }
  write_json(tp, timings);

  std::vector<fs::path> artifacts;
  for (const auto& id : ids) {
    artifacts.push_back(path("scans/" + id + ".json"));
    artifacts.push_back(path("scans/" + id + ".trigger.json"));
  }
  record_phase("scan", artifacts, seconds_since(start));
}

void Run::detect() {
  require("scan");
  const auto start = std::chrono::steady_clock::now();
  const Tensor images = load_sts_raw(path("data/scan.stsd")).all_images();
  const auto ids = model_ids();
  std::vector<ModelDetection> detections(ids.size());
  parallel_for(ids.size(), config_.workers, [&](std::size_t i) {
    const auto model = load_checkpoint(path("models/" + ids[i] + ".stsm"));
    const auto trigger = load_trigger(path("scans/" + ids[i] + ".trigger.json"));
    detections[i].model_id = ids[i];
    detections[i].report = entropy_score(model, images, trigger, config_.delta);
  });
  // Ground truth is joined only after every verdict is fixed.
  for (auto& d : detections) d.is_trojan = read_json(path("truth/" + d.model_id + ".json")).at("is_trojan");
  const auto summary = summarize(std::move(detections));
  write_json(path("detection.json"), to_json(summary));
  io::write_text(path("detection.csv"), to_csv(summary));
  record_phase("detect", {path("detection.json"), path("detection.csv")}, seconds_since(start));
}

void Run::analyze() {
  require("detect");
  const auto start = std::chrono::steady_clock::now();
  const auto& c = config_;
  std::vector<std::string> chosen;
  for (const auto& id : model_ids()) {
    const auto truth = read_json(path("truth/" + id + ".json"));
    if (truth.at("is_trojan").get<bool>() && truth.at("size").get<std::size_t>() == c.analysis_scan.mode.size) {
      chosen.push_back(id);
    }
    if (chosen.size() == c.analysis_models) break;
  }
  const Tensor images = load_sts_raw(path("data/scan.stsd")).all_images();
  fs::create_directories(path("analysis"));
  std::vector<fs::path> artifacts;
  for (const auto& id : chosen) {
    const auto rel = "analysis/" + id;
    artifacts.push_back(path(rel + ".json"));
    artifacts.push_back(path(rel + ".pca.csv"));
    if (reusable("analyze", {rel + ".json", rel + ".pca.csv"})) continue;
    const auto model = load_checkpoint(path("models/" + id + ".stsm"));
    ScanConfig sc = c.analysis_scan;
    sc.seed = derive_seed(c.seed, "analysis:" + id);
    sc.workers = c.workers;
    const auto result = scan(model, images, sc);
    const auto all = patch_vectors(result, model, images);
    const auto kept = effective_patches(all, c.analysis_effectiveness);
    const auto original = load_trigger(path("triggers/" + id + ".json"));

    json restarts = json::array();
    for (const auto& p : all) {
      restarts.push_back({{"restart", p.restart},
                          {"effectiveness", p.effectiveness},
                          {"final_loss", result.restarts[p.restart].final_loss},
                          {"rmse", patch_rmse(p.values, std::vector<double>(original.patch.data().begin(),
                                                                            original.patch.data().end()))}});
    }
    json out = {{"model_id", id},
                {"scan", to_json(result, false)},
                {"restarts", restarts},
                {"min_effectiveness", c.analysis_effectiveness},
                {"retained", kept.size()}};
    std::string csv = "restart,pc1,pc2,cluster\n";
    if (!kept.empty()) {
      const auto match = best_match_rmse(kept, original);
      out["best_match"] = {{"rmse", match.rmse}, {"restart", match.restart}};
    }
    if (kept.size() >= std::max<std::size_t>(c.cluster.k_min, 2)) {
      ClusterConfig cc = c.cluster;
      cc.seed = derive_seed(c.seed, "kmeans:" + id);
      const auto report = cluster_patches(kept, cc);
      out["clusters"] = to_json(report);
      csv = pca_csv(report);
    }
    write_json(path(rel + ".json"), out);
    io::write_text(path(rel + ".pca.csv"), csv);
  }
  record_phase("analyze", artifacts, seconds_since(start));
}

void Run::report() {
  const auto start = std::chrono::steady_clock::now();
  const auto r = build_report(dir_);
  fs::create_directories(path("report"));
  write_json(path("report/report.json"), r);

  std::ostringstream eff, pop, minmax;
  eff.precision(10);
  pop.precision(10);
  minmax.precision(10);
  eff << "model_id,population,pmpd,tmpd,tmtd,accepted\n";
  for (const auto& e : r["effectiveness"]) {
    eff << e["model_id"].get<std::string>() << ',' << e["population"].get<std::string>() << ','
        << e["pmpd"].get<double>() << ',' << e["tmpd"].get<double>() << ',' << e["tmtd"].get<double>() << ','
        << (e["accepted"].get<bool>() ? "yes" : "no") << '\n';
  }
  pop << "population,models,mean_entropy,min_entropy,max_entropy,detected\n";
  minmax << "population,entropy_range\n";
  for (const auto& p : r["populations"]) {
    pop << p["population"].get<std::string>() << ',' << p["models"].get<std::size_t>() << ','
        << p["mean_entropy"].get<double>() << ',' << p["min_entropy"].get<double>() << ','
        << p["max_entropy"].get<double>() << ',' << p["flagged_trojan"].get<std::size_t>() << '\n';
    minmax << p["population"].get<std::string>() << ",[" << p["min_entropy"].get<double>() << ','
           << p["max_entropy"].get<double>() << "]\n";
  }
  io::write_text(path("report/effectiveness.csv"), eff.str());
  io::write_text(path("report/entropy.csv"), pop.str());
  io::write_text(path("report/entropy_minmax.csv"), minmax.str());

  // Wallclock table; kept out of the manifest hashes.
  std::ostringstream timing;
  timing << "model_id,num_classes,scan_seconds\n";
  const auto tp = path("timings.json");
  const json timings = fs::exists(tp) ? read_json(tp) : json::object();
  if (timings.contains("scan_seconds")) {
    for (const auto& [id, s] : timings["scan_seconds"].items()) {
      timing << id << ',' << config_.arch.num_classes << ',' << s.get<double>() << '\n';
    }
  }
  io::write_text(path("report/timing.csv"), timing.str());

  record_phase("report",
               {path("report/report.json"), path("report/effectiveness.csv"), path("report/entropy.csv"),
                path("report/entropy_minmax.csv")},
               seconds_since(start));
}

json build_report(const fs::path& dir) {
  if (!fs::exists(dir / "config.json")) {
    std::string list;
    for (const auto& p : protocol_phases()) list += (list.empty() ? "" : ", ") + p;
    throw Error("incomplete", dir.string() + " holds no run; missing phases: " + list);
  }
  auto run = Run::open(dir);
  std::vector<std::string> missing;
  for (const auto& p : run.missing_phases()) {
    if (p != "report") missing.push_back(p);
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& p : missing) list += (list.empty() ? "" : ", ") + p;
    throw Error("incomplete", "run is missing phases: " + list);
  }
  const auto& c = run.config();
  const json detection = read_json(dir / "detection.json");

  json effectiveness_rows = json::array();
  std::map<std::string, std::vector<json>> populations;
  for (const auto& m : detection["models"]) {
    const std::string id = m["model_id"];
    const auto truth = read_json(dir / "truth" / (id + ".json"));
    const auto name = population_name(truth);
    populations[name].push_back(m);
    if (truth["is_trojan"].get<bool>()) {
      auto e = read_json(dir / "effectiveness" / (id + ".json"));
      e["population"] = name;
      effectiveness_rows.push_back(e);
    }
  }
  json pop_rows = json::array();
  for (const auto& [name, models] : populations) {
    double sum = 0.0, lo = std::numeric_limits<double>::infinity(), hi = -lo;
    std::size_t flagged = 0;
    for (const auto& m : models) {
      const double h = m["entropy_bits"];
      sum += h;
      lo = std::min(lo, h);
      hi = std::max(hi, h);
      flagged += m["verdict"] == "trojan";
    }
    pop_rows.push_back({{"population", name},
                        {"models", models.size()},
                        {"mean_entropy", sum / static_cast<double>(models.size())},
                        {"min_entropy", lo},
                        {"max_entropy", hi},
                        {"flagged_trojan", flagged}});
  }
  json analysis = json::array();
  if (c.analyze && fs::exists(dir / "analysis")) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir / "analysis")) {
      if (entry.path().extension() == ".json") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      const auto a = read_json(f);
      json row = {{"model_id", a["model_id"]}, {"retained", a["retained"]}, {"restarts", a["restarts"].size()}};
      if (a.contains("best_match")) row["best_match_rmse"] = a["best_match"]["rmse"];
      if (a.contains("clusters")) row["k"] = a["clusters"]["k"];
      analysis.push_back(row);
    }
  }
  return {{"tool_version", kToolVersion},
          {"num_classes", c.arch.num_classes},
          {"delta", c.delta},
          {"delta_note", "assumed Trojan effectiveness 1 - delta"},
          {"threshold_bits", lemma1_threshold(c.arch.num_classes, c.delta)},
          {"f1", detection["f1"]},
          {"confusion", detection["confusion"]},
          {"effectiveness", effectiveness_rows},
          {"populations", pop_rows},
          {"models", detection["models"]},
          {"analysis", analysis}};
}

}  // namespace sts
