#include "gradleak/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "gradleak/container.hpp"
#include "gradleak/fl.hpp"
#include "gradleak/rng.hpp"

namespace gradleak {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + " must be a JSON object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!ok.count(it.key())) throw ValidationError("unknown key '" + it.key() + "' in " + where);
  }
}

json attack_to_json(const AttackSettings& a) {
  return {{"steps", a.inversion.steps},
          {"learning_rate", a.inversion.learning_rate},
          {"tv_weight", a.inversion.tv_weight},
          {"restarts", a.inversion.restarts},
          {"trace_every", a.inversion.trace_every},
          {"invert_all", a.invert_all},
          {"baseline", a.baseline},
          {"baseline_steps", a.baseline_settings.steps},
          {"baseline_learning_rate", a.baseline_settings.learning_rate},
          {"baseline_restarts", a.baseline_settings.restarts}};
}

AttackSettings attack_from_json(const json& j) {
  check_keys(j, {"steps", "learning_rate", "tv_weight", "restarts", "trace_every", "invert_all",
                 "baseline", "baseline_steps", "baseline_learning_rate", "baseline_restarts"},
             "attack");
  AttackSettings a;
  auto& inv = a.inversion;
  inv.steps = j.value("steps", inv.steps);
  inv.learning_rate = j.value("learning_rate", inv.learning_rate);
  inv.tv_weight = j.value("tv_weight", inv.tv_weight);
  inv.restarts = j.value("restarts", inv.restarts);
  inv.trace_every = j.value("trace_every", inv.trace_every);
  a.invert_all = j.value("invert_all", a.invert_all);
  a.baseline = j.value("baseline", a.baseline);
  a.baseline_settings = inv;
  a.baseline_settings.steps = j.value("baseline_steps", inv.steps);
  a.baseline_settings.learning_rate = j.value("baseline_learning_rate", inv.learning_rate);
  a.baseline_settings.restarts = j.value("baseline_restarts", inv.restarts);
  if (inv.steps == 0 || inv.restarts == 0 || a.baseline_settings.steps == 0 ||
      a.baseline_settings.restarts == 0) {
    throw ValidationError("attack steps and restarts must be >= 1");
  }
  return a;
}

}  // namespace

ExperimentConfig experiment_from_json(const json& j) {
  try {
    check_keys(j, {"name", "seed", "output_dir", "dataset", "model", "train", "capture", "attack"},
               "experiment config");
    ExperimentConfig c;
    c.name = j.value("name", c.name);
    c.seed = j.value("seed", c.seed);
    c.output_dir = j.value("output_dir", c.output_dir);

    const json d = j.value("dataset", json::object());
    check_keys(d, {"source", "classes", "per_class", "size", "channels", "noise", "contrast",
                   "idx_images", "idx_labels", "cifar_files", "test_fraction"},
               "dataset");
    auto& ds = c.dataset;
    ds.source = d.value("source", ds.source);
    if (ds.source != "synthetic" && ds.source != "idx" && ds.source != "cifar") {
      throw ValidationError("dataset.source must be synthetic, idx or cifar");
    }
    ds.synthetic.classes = d.value("classes", ds.synthetic.classes);
    ds.synthetic.per_class = d.value("per_class", ds.synthetic.per_class);
    ds.synthetic.size = d.value("size", ds.synthetic.size);
    ds.synthetic.channels = d.value("channels", ds.synthetic.channels);
    ds.synthetic.noise = d.value("noise", ds.synthetic.noise);
    ds.synthetic.contrast = d.value("contrast", ds.synthetic.contrast);
    ds.idx_images = d.value("idx_images", ds.idx_images);
    ds.idx_labels = d.value("idx_labels", ds.idx_labels);
    ds.cifar_files = d.value("cifar_files", ds.cifar_files);
    ds.test_fraction = d.value("test_fraction", ds.test_fraction);
    if (!(ds.test_fraction > 0.0 && ds.test_fraction < 1.0)) {
      throw ValidationError("dataset.test_fraction must be in (0, 1)");
    }

    const json m = j.value("model", json::object());
    check_keys(m, {"arch", "head_bias", "widths"}, "model");
    c.model.arch = architecture_from_string(m.value("arch", to_string(c.model.arch)));
    c.model.head_bias = m.value("head_bias", false);
    c.model.widths = m.value("widths", std::vector<std::size_t>{});

    const json t = j.value("train", json::object());
    check_keys(t, {"epochs", "batch_size", "optimizer", "at"}, "train");
    c.train = train_config_from_json(t);

    const json cap = j.value("capture", json::object());
    check_keys(cap, {"batch_size", "anchors", "batches_per_anchor", "distinct_labels"}, "capture");
    c.capture.batch_size = cap.value("batch_size", c.capture.batch_size);
    c.capture.anchors = cap.value("anchors", c.capture.anchors);
    c.capture.batches_per_anchor = cap.value("batches_per_anchor", c.capture.batches_per_anchor);
    c.capture.distinct_labels = cap.value("distinct_labels", c.capture.distinct_labels);
    if (c.capture.batch_size == 0 || c.capture.anchors == 0 || c.capture.batches_per_anchor == 0) {
      throw ValidationError("capture batch_size, anchors and batches_per_anchor must be >= 1");
    }

    c.attack = attack_from_json(j.value("attack", json::object()));
    return c;
  } catch (const ValidationError&) {
    throw;
  } catch (const std::exception& e) {
    throw ValidationError(std::string("invalid experiment config: ") + e.what());
  }
}

json to_json(const ExperimentConfig& c) {
  json t = to_json(c.train);
  t.erase("seed");
  const auto& s = c.dataset.synthetic;
  return {{"name", c.name},
          {"seed", c.seed},
          {"output_dir", c.output_dir},
          {"dataset",
           {{"source", c.dataset.source},
            {"classes", s.classes},
            {"per_class", s.per_class},
            {"size", s.size},
            {"channels", s.channels},
            {"noise", s.noise},
            {"contrast", s.contrast},
            {"idx_images", c.dataset.idx_images},
            {"idx_labels", c.dataset.idx_labels},
            {"cifar_files", c.dataset.cifar_files},
            {"test_fraction", c.dataset.test_fraction}}},
          {"model",
           {{"arch", to_string(c.model.arch)},
            {"head_bias", c.model.head_bias},
            {"widths", c.model.widths}}},
          {"train", t},
          {"capture",
           {{"batch_size", c.capture.batch_size},
            {"anchors", c.capture.anchors},
            {"batches_per_anchor", c.capture.batches_per_anchor},
            {"distinct_labels", c.capture.distinct_labels}}},
          {"attack", attack_to_json(c.attack)}};
}

ExperimentConfig load_experiment(const fs::path& path) {
  if (!fs::exists(path)) throw MissingArtifact(path);
  std::ifstream in(path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return experiment_from_json(j);
}

std::string config_hash(const ExperimentConfig& c) { return sha256_hex(to_json(c).dump()); }

void configure_logging() {
  const char* env = std::getenv("GRADLEAK_LOG");
  const std::string level = env ? env : "info";
  if (level == "error") {
    spdlog::set_level(spdlog::level::err);
  } else if (level == "info") {
    spdlog::set_level(spdlog::level::info);
  } else if (level == "debug") {
    spdlog::set_level(spdlog::level::debug);
  } else {
    throw ValidationError("GRADLEAK_LOG must be error, info or debug (got '" + level + "')");
  }
}

namespace {

void require(const fs::path& p) {
  if (!fs::exists(p)) throw MissingArtifact(p);
}

void write_manifest(const fs::path& out, const std::string& stage, const ExperimentConfig& c,
                    const std::vector<fs::path>& inputs, const std::vector<fs::path>& outputs,
                    json extra = json::object()) {
  json m;
  m["stage"] = stage;
  m["config_hash"] = config_hash(c);
  m["config"] = to_json(c);
  m["seed"] = c.seed;
  auto hashes = [&](const std::vector<fs::path>& paths) {
    json h = json::object();
    for (const auto& p : paths) h[fs::relative(p, out).generic_string()] = sha256_file(p);
    return h;
  };
  m["inputs"] = hashes(inputs);
  m["outputs"] = hashes(outputs);
  for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = it.value();
  write_text_atomic(out / stage / "manifest.json", m.dump(2) + "\n");
}

struct Paths {
  fs::path root;
  fs::path train_set() const { return root / "dataset" / "train.glds"; }
  fs::path test_set() const { return root / "dataset" / "test.glds"; }
  fs::path model() const { return root / "train" / "model.glck"; }
  fs::path history() const { return root / "train" / "history.csv"; }
  fs::path anchors() const { return root / "capture" / "anchors.json"; }
  fs::path packet(std::size_t a, std::size_t b) const {
    return root / "capture" / ("a" + pad(a) + "-b" + std::to_string(b) + ".glgp");
  }
  fs::path groundtruth(std::size_t a, std::size_t b) const {
    return root / "capture" / ("a" + pad(a) + "-b" + std::to_string(b) + ".groundtruth");
  }
  fs::path results() const { return root / "attack" / "results.glar"; }
  fs::path traces() const { return root / "attack" / "traces.csv"; }
  fs::path report() const { return root / "report"; }

  static std::string pad(std::size_t a) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%03zu", a);
    return buf;
  }
};

ModelSpec model_spec_for(const ExperimentConfig& c, const Dataset& d) {
  ModelSpec s = c.model;
  s.channels = d.channels();
  s.height = d.height();
  s.width = d.width();
  s.classes = d.classes;
  s.feature_dim = 0;
  return s;
}

}  // namespace

void run_dataset_stage(const ExperimentConfig& c, const fs::path& out) {
  const Paths p{out};
  Dataset full;
  if (c.dataset.source == "synthetic") {
    SyntheticSpec s = c.dataset.synthetic;
    s.seed = derive_seed(c.seed, "dataset");
    full = generate_synthetic(s);
  } else if (c.dataset.source == "idx") {
    require(c.dataset.idx_images);
    require(c.dataset.idx_labels);
    full = load_idx(c.dataset.idx_images, c.dataset.idx_labels);
  } else {
    std::vector<fs::path> files(c.dataset.cifar_files.begin(), c.dataset.cifar_files.end());
    for (const auto& f : files) require(f);
    full = load_cifar_binary(files);
  }
  auto [train_set, test_set] = split_dataset(full, c.dataset.test_fraction, derive_seed(c.seed, "split"));
  save_dataset(train_set, p.train_set());
  save_dataset(test_set, p.test_set());
  spdlog::info("dataset: {} train / {} test images, K={}", train_set.size(), test_set.size(),
               full.classes);
  write_manifest(out, "dataset", c, {}, {p.train_set(), p.test_set()});
}

void run_train_stage(const ExperimentConfig& c, const fs::path& out) {
  const Paths p{out};
  require(p.train_set());
  require(p.test_set());
  const Dataset train_set = load_dataset(p.train_set());
  const Dataset test_set = load_dataset(p.test_set());
  Model model = build_model(model_spec_for(c, train_set), derive_seed(c.seed, "model-init"));
  TrainConfig tc = c.train;
  tc.seed = derive_seed(c.seed, "train");
  const TrainHistory h = train(model, train_set, &test_set, tc);
  save_checkpoint(model, p.model());
  write_text_atomic(p.history(), h.to_csv());
  json extra;
  if (!h.epochs.empty() && h.epochs.back().test_acc) extra["test_acc"] = *h.epochs.back().test_acc;
  write_manifest(out, "train", c, {p.train_set(), p.test_set()}, {p.model(), p.history()}, extra);
}

void run_capture_stage(const ExperimentConfig& c, const fs::path& out) {
  const Paths p{out};
  require(p.model());
  require(p.test_set());
  const Model model = load_checkpoint(p.model());
  const Dataset test_set = load_dataset(p.test_set());
  const auto& cap = c.capture;
  if (cap.anchors > test_set.size()) {
    throw ValidationError("capture.anchors exceeds the test set size " + std::to_string(test_set.size()));
  }
  std::vector<std::size_t> pool(test_set.size());
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  Rng rng(derive_seed(c.seed, "capture-anchors"));
  for (std::size_t k = 0; k < cap.anchors; ++k) {
    std::swap(pool[k], pool[k + uniform_index(rng, pool.size() - k)]);
  }

  ClientOptions opts;
  opts.at = c.train.at;
  opts.allow_duplicate_labels = !cap.distinct_labels;
  opts.checkpoint_path = fs::relative(p.model(), out).generic_string();
  json anchors = json::array();
  std::vector<fs::path> outputs;
  for (std::size_t a = 0; a < cap.anchors; ++a) {
    const std::size_t anchor = pool[a];
    json entry = {{"anchor", anchor}, {"label", test_set.labels[anchor]},
                  {"packets", json::array()}, {"groundtruth", json::array()}};
    for (std::size_t b = 0; b < cap.batches_per_anchor; ++b) {
      const std::uint64_t idx = a * cap.batches_per_anchor + b;
      BatchSpec bs{cap.batch_size, anchor, cap.distinct_labels, derive_seed(c.seed, "capture-batch", idx)};
      const Batch batch = sample_batch(test_set, bs);
      opts.round_id = idx;
      opts.client_id = "client-" + std::to_string(idx);
      Rng client_rng(derive_seed(c.seed, "client-pgd", idx));
      ClientStep step = client_local_step(model, batch.images, batch.labels, opts, client_rng);
      step.record.indices = batch.indices;
      serialize_packet(step.packet, p.packet(a, b));
      save_groundtruth(step.record, p.groundtruth(a, b));
      entry["packets"].push_back(p.packet(a, b).filename().string());
      entry["groundtruth"].push_back(p.groundtruth(a, b).filename().string());
      outputs.push_back(p.packet(a, b));
      outputs.push_back(p.groundtruth(a, b));
    }
    anchors.push_back(entry);
  }
  write_text_atomic(p.anchors(), json{{"anchors", anchors}}.dump(2) + "\n");
  outputs.push_back(p.anchors());
  spdlog::info("capture: {} anchors x {} batches of N={}", cap.anchors, cap.batches_per_anchor,
               cap.batch_size);
  write_manifest(out, "capture", c, {p.model(), p.test_set()}, outputs);
}

namespace {

json restarts_to_json(const std::vector<RestartOutcome>& rs) {
  json arr = json::array();
  for (const auto& r : rs) {
    json trace = json::array();
    for (const auto& t : r.trace) trace.push_back({t.step, t.objective});
    arr.push_back({{"objective", r.objective},
                   {"cosine_distance", r.cosine_distance},
                   {"seed", r.seed},
                   {"failed", r.failed},
                   {"trace", trace}});
  }
  return arr;
}

std::vector<RestartOutcome> restarts_from_json(const json& arr) {
  std::vector<RestartOutcome> out;
  for (const auto& r : arr) {
    RestartOutcome o;
    o.objective = r.at("objective").get<double>();
    o.cosine_distance = r.at("cosine_distance").get<double>();
    o.seed = r.at("seed").get<std::uint64_t>();
    o.failed = r.at("failed").get<bool>();
    for (const auto& t : r.at("trace")) o.trace.push_back({t[0].get<std::size_t>(), t[1].get<double>()});
    out.push_back(std::move(o));
  }
  return out;
}

std::string array_key(std::size_t a, std::size_t b, const std::string& kind, int label = -1) {
  std::string k = "a" + std::to_string(a) + ".b" + std::to_string(b) + "." + kind;
  if (label >= 0) k += "." + std::to_string(label);
  return k;
}

}  // namespace

void save_attack_results(const std::vector<AnchorAttack>& results, const fs::path& path) {
  Container c;
  c.magic = kAttackMagic;
  json anchors = json::array();
  for (std::size_t a = 0; a < results.size(); ++a) {
    const auto& r = results[a];
    json batches = json::array();
    for (std::size_t b = 0; b < r.batches.size(); ++b) {
      const auto& ba = r.batches[b];
      json inversions = json::array();
      for (std::size_t i = 0; i < ba.inversions.size(); ++i) {
        const auto& inv = ba.inversions[i];
        inversions.push_back({{"label", ba.inverted_labels[i]},
                              {"objective", inv.objective},
                              {"best_restart", inv.best_restart},
                              {"restarts", restarts_to_json(inv.restarts)}});
        c.arrays.push_back({array_key(a, b, "inversion", ba.inverted_labels[i]), inv.image});
      }
      json features = json::array();
      for (const auto& f : ba.features) {
        features.push_back(f.label);
        c.arrays.push_back({array_key(a, b, "feature", f.label), f.feature});
      }
      json baseline = nullptr;
      if (ba.baseline) {
        baseline = {{"objective", ba.baseline->objective},
                    {"best_restart", ba.baseline->best_restart},
                    {"restarts", restarts_to_json(ba.baseline->restarts)}};
        c.arrays.push_back({array_key(a, b, "baseline"), ba.baseline->images});
      }
      batches.push_back({{"recovery",
                          {{"labels", ba.recovery.labels},
                           {"column_minima", ba.recovery.column_minima},
                           {"negative_columns", ba.recovery.negative_columns},
                           {"duplicate_suspected", ba.recovery.duplicate_suspected}}},
                         {"features", features},
                         {"inversions", inversions},
                         {"baseline", baseline},
                         {"warnings", ba.warnings}});
    }
    anchors.push_back({{"anchor", r.anchor},
                       {"anchor_label", r.anchor_label},
                       {"best_by_objective", r.best_by_objective ? json(*r.best_by_objective) : json(nullptr)},
                       {"batches", batches}});
  }
  c.header = {{"anchors", anchors}};
  write_container(path, c);
}

std::vector<AnchorAttack> load_attack_results(const fs::path& path) {
  const Container c = read_container(path, kAttackMagic);
  std::vector<AnchorAttack> out;
  const auto& anchors = c.header.at("anchors");
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    const auto& ja = anchors[a];
    AnchorAttack r;
    r.anchor = ja.at("anchor").get<std::size_t>();
    r.anchor_label = ja.at("anchor_label").get<int>();
    if (!ja.at("best_by_objective").is_null()) r.best_by_objective = ja.at("best_by_objective").get<std::size_t>();
    const auto& batches = ja.at("batches");
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto& jb = batches[b];
      BatchAttack ba;
      const auto& rec = jb.at("recovery");
      ba.recovery.labels = rec.at("labels").get<std::vector<int>>();
      ba.recovery.column_minima = rec.at("column_minima").get<std::vector<float>>();
      ba.recovery.negative_columns = rec.at("negative_columns").get<std::size_t>();
      ba.recovery.duplicate_suspected = rec.at("duplicate_suspected").get<bool>();
      for (int label : jb.at("features").get<std::vector<int>>()) {
        RestoredFeature f;
        f.label = label;
        f.feature = c.at(array_key(a, b, "feature", label));
        f.raw_column = f.feature;
        for (auto& v : f.raw_column.data) v = -v;
        ba.features.push_back(std::move(f));
      }
      for (const auto& ji : jb.at("inversions")) {
        InversionResult inv;
        const int label = ji.at("label").get<int>();
        inv.objective = ji.at("objective").get<double>();
        inv.best_restart = ji.at("best_restart").get<std::size_t>();
        inv.restarts = restarts_from_json(ji.at("restarts"));
        inv.image = c.at(array_key(a, b, "inversion", label));
        ba.inverted_labels.push_back(label);
        ba.inversions.push_back(std::move(inv));
      }
      if (!jb.at("baseline").is_null()) {
        BaselineResult base;
        base.objective = jb.at("baseline").at("objective").get<double>();
        base.best_restart = jb.at("baseline").at("best_restart").get<std::size_t>();
        base.restarts = restarts_from_json(jb.at("baseline").at("restarts"));
        base.images = c.at(array_key(a, b, "baseline"));
        ba.baseline = std::move(base);
      }
      ba.warnings = jb.at("warnings").get<std::vector<std::string>>();
      r.batches.push_back(std::move(ba));
    }
    out.push_back(std::move(r));
  }
  return out;
}

void run_attack_stage(const ExperimentConfig& c, const fs::path& out, std::size_t jobs) {
  const Paths p{out};
  require(p.model());
  require(p.anchors());
  const Model model = load_checkpoint(p.model());
  std::ifstream in(p.anchors());
  const json anchors = json::parse(in).at("anchors");
  std::vector<AnchorCase> cases;
  std::vector<fs::path> inputs{p.model(), p.anchors()};
  for (const auto& ja : anchors) {
    AnchorCase ac;
    ac.anchor = ja.at("anchor").get<std::size_t>();
    ac.anchor_label = ja.at("label").get<int>();
    for (const auto& name : ja.at("packets")) {
      const fs::path path = out / "capture" / name.get<std::string>();
      require(path);
      ac.packets.push_back(deserialize_packet(path, model));
      inputs.push_back(path);
    }
    cases.push_back(std::move(ac));
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = run_attack(model, cases, c.attack, derive_seed(c.seed, "attack"), jobs);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  save_attack_results(results, p.results());

  std::string csv = "anchor,batch,label,restart,step,objective\n";
  for (const auto& r : results)
    for (std::size_t b = 0; b < r.batches.size(); ++b) {
      const auto& ba = r.batches[b];
      for (std::size_t i = 0; i < ba.inversions.size(); ++i) {
        const auto& restarts = ba.inversions[i].restarts;
        for (std::size_t k = 0; k < restarts.size(); ++k)
          for (const auto& t : restarts[k].trace) {
            char buf[160];
            std::snprintf(buf, sizeof buf, "%zu,%zu,%d,%zu,%zu,%.6f\n", r.anchor, b,
                          ba.inverted_labels[i], k, t.step, t.objective);
            csv += buf;
          }
      }
    }
  write_text_atomic(p.traces(), csv);
  json timing = {{"seconds", seconds}, {"jobs", jobs}};
  write_text_atomic(out / "attack" / "timing.json", timing.dump(2) + "\n");
  write_manifest(out, "attack", c, inputs, {p.results(), p.traces()});
}

ConfigResult load_config_result(const ExperimentConfig& c, const fs::path& out) {
  const Paths p{out};
  require(p.results());
  require(p.anchors());
  const auto attacks = load_attack_results(p.results());
  std::ifstream in(p.anchors());
  const json anchors = json::parse(in).at("anchors");
  if (anchors.size() != attacks.size()) {
    throw ValidationError("attack results do not match " + p.anchors().string());
  }
  ConfigResult result;
  result.name = c.name;
  for (std::size_t a = 0; a < attacks.size(); ++a) {
    std::vector<ClientRoundRecord> records;
    for (const auto& name : anchors[a].at("groundtruth")) {
      const fs::path path = out / "capture" / name.get<std::string>();
      require(path);
      records.push_back(load_groundtruth(path));
    }
    result.anchors.push_back(score_anchor(attacks[a], records));
  }
  return result;
}

void run_evaluate_stage(const ExperimentConfig& c, const fs::path& out) {
  const Paths p{out};
  const ConfigResult result = load_config_result(c, out);
  emit_report(std::span<const ConfigResult>(&result, 1), p.report());
  std::vector<fs::path> inputs{p.results(), p.anchors()};
  for (const auto& e : fs::directory_iterator(out / "capture")) {
    if (e.path().extension() == ".groundtruth") inputs.push_back(e.path());
  }
  std::sort(inputs.begin(), inputs.end());
  write_manifest(out, "report", c, inputs,
                 {p.report() / "summary.json", p.report() / "curves.csv", p.report() / "curves.svg"});
}

void run_all_stages(const ExperimentConfig& c, const fs::path& out, std::size_t jobs) {
  run_dataset_stage(c, out);
  run_train_stage(c, out);
  run_capture_stage(c, out);
  run_attack_stage(c, out, jobs);
  run_evaluate_stage(c, out);
}

std::vector<SweepCell> expand_sweep(const json& grid) {
  check_keys(grid, {"base", "grid"}, "sweep file");
  if (!grid.contains("base") || !grid.contains("grid")) {
    throw ValidationError("sweep file needs 'base' and 'grid'");
  }
  const json& base = grid.at("base");
  const json& axes = grid.at("grid");
  if (!axes.is_object() || axes.empty()) throw ValidationError("sweep grid must be a non-empty object");
  std::vector<std::string> keys;
  for (auto it = axes.begin(); it != axes.end(); ++it) {
    if (!it.value().is_array() || it.value().empty()) {
      throw ValidationError("sweep axis '" + it.key() + "' must be a non-empty array");
    }
    keys.push_back(it.key());
  }
  std::vector<SweepCell> cells;
  std::vector<std::size_t> idx(keys.size(), 0);
  const std::string base_name = base.value("name", std::string("sweep"));
  while (true) {
    json cfg = base;
    json overrides = json::object();
    std::string label;
    for (std::size_t k = 0; k < keys.size(); ++k) {
      const json& v = axes.at(keys[k])[idx[k]];
      try {
        cfg[json::json_pointer(keys[k])] = v;
      } catch (const json::exception& e) {
        throw ValidationError("bad sweep pointer '" + keys[k] + "': " + e.what());
      }
      overrides[keys[k]] = v;
      label += (k ? "," : "") + keys[k].substr(keys[k].rfind('/') + 1) + "=" + v.dump();
    }
    char dir[32];
    std::snprintf(dir, sizeof dir, "cell-%03zu", cells.size());
    cfg["name"] = base_name + ":" + label;
    cells.push_back({dir, overrides, experiment_from_json(cfg)});
    std::size_t k = keys.size();
    while (k > 0) {
      --k;
      if (++idx[k] < axes.at(keys[k]).size()) break;
      idx[k] = 0;
      if (k == 0) return cells;
    }
  }
}

void run_sweep(const json& grid, const fs::path& out, std::size_t jobs) {
  const auto cells = expand_sweep(grid);
  std::vector<std::exception_ptr> errors(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < cells.size();) {
      try {
        spdlog::info("sweep cell {} ({})", cells[i].name, cells[i].config.name);
        run_all_stages(cells[i].config, out / cells[i].name, 1);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  jobs = std::max<std::size_t>(1, std::min(jobs, cells.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < jobs; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  std::vector<ConfigResult> results;
  json listing = json::array();
  for (const auto& cell : cells) {
    results.push_back(load_config_result(cell.config, out / cell.name));
    listing.push_back({{"dir", cell.name},
                       {"name", cell.config.name},
                       {"overrides", cell.overrides},
                       {"config_hash", config_hash(cell.config)}});
  }
  emit_report(results, out / "report");
  write_text_atomic(out / "sweep.json", json{{"cells", listing}, {"grid", grid}}.dump(2) + "\n");
}

}  // namespace gradleak
