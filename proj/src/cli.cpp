#include "asdscreen/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "asdscreen/datamodel.hpp"
#include "asdscreen/errors.hpp"
#include "asdscreen/evalreport.hpp"
#include "asdscreen/fusion.hpp"
#include "asdscreen/ingest.hpp"
#include "asdscreen/io_util.hpp"
#include "asdscreen/neural.hpp"
#include "asdscreen/tabular.hpp"

namespace asdscreen::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kDefaultGrid = "1e-4,1e-3,1e-2,1e-1,1,10,100";

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::map<std::string, std::string> run_metadata(const Stopwatch& clock) {
  return {{"created_at", utc_now()}, {"wall_seconds", io::format_double(clock.seconds())}};
}

// Options shared by every command that writes a run directory.
struct RunOptions {
  std::string run_id;
  bool overwrite = false;
};

void add_run_options(CLI::App* sub, RunOptions& o) {
  sub->add_option("--run-id", o.run_id,
                  "Name of the output directory (default: derived from the options)");
  sub->add_flag("--overwrite", o.overwrite, "Replace an existing run directory");
}

// Run id derived from every option value except the ones naming the output.
std::string derive_run_id(const CLI::App* sub, const std::string& prefix) {
  std::istringstream lines(sub->config_to_str(true, false));
  std::string canonical;
  for (std::string line; std::getline(lines, line);) {
    if (line.rfind("run-id", 0) == 0 || line.rfind("overwrite", 0) == 0) continue;
    canonical += line + "\n";
  }
  return prefix + "-" + io::sha256_hex(canonical).substr(0, 12);
}

void check_run_id(const std::string& id) {
  if (id.empty() || id == "." || id == "..") throw ValidationError("run id must not be empty");
  for (char ch : id) {
    const bool ok = (ch >= 'a' && ch <= 'z') || (ch >= 'A' && ch <= 'Z') ||
                    (ch >= '0' && ch <= '9') || ch == '-' || ch == '_' || ch == '.';
    if (!ok) throw ValidationError("run id '" + id + "' may only contain [A-Za-z0-9._-]");
  }
}

fs::path prepare_run_dir(const fs::path& root, const std::string& run_id, bool overwrite) {
  check_run_id(run_id);
  const fs::path dir = root / run_id;
  std::error_code ec;
  if (fs::exists(dir, ec)) {
    if (!overwrite) {
      throw IoError("output directory " + dir.string() +
                    " already exists; pass --overwrite to replace it");
    }
    fs::remove_all(dir, ec);
    if (ec) throw IoError("cannot clear " + dir.string() + ": " + ec.message());
  }
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  return dir;
}

std::string run_id_or_derived(const RunOptions& o, const CLI::App* sub,
                              const std::string& prefix) {
  return o.run_id.empty() ? derive_run_id(sub, prefix) : o.run_id;
}

std::vector<double> parse_grid(const std::string& text) {
  std::vector<double> grid;
  std::string cell;
  std::istringstream s(text);
  while (std::getline(s, cell, ',')) {
    try {
      std::size_t used = 0;
      grid.push_back(std::stod(cell, &used));
      if (used != cell.size()) throw std::invalid_argument(cell);
    } catch (const std::exception&) {
      throw ValidationError("grid entry '" + cell + "' is not a number");
    }
  }
  if (grid.empty()) throw ValidationError("learning-rate grid is empty");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!(grid[i] > 0.0)) throw ValidationError("learning rates must be positive");
    if (i > 0 && !(grid[i] > grid[i - 1])) {
      throw ValidationError("learning-rate grid must be strictly increasing");
    }
  }
  return grid;
}

json provenance_json(const Provenance& p) {
  return {{"n_total", p.n_total}, {"n_asd", p.n_asd}, {"n_nonasd", p.n_nonasd}};
}

// ---------------------------------------------------------------------------
// Tabular input

struct TabularInput {
  CsvSchema schema;
  AdosModule module = AdosModule::Module3;
  Dataset data{DatasetKind::Tabular, {}};
};

struct SchemaOptions {
  std::string id_column = "id";
  std::string label_column = "label";
  std::vector<std::string> features;  // empty: every other header column
};

void add_schema_options(CLI::App* sub, SchemaOptions& o) {
  sub->add_option("--id-column", o.id_column, "Subject id column")->capture_default_str();
  sub->add_option("--label-column", o.label_column, "Label column")->capture_default_str();
  sub->add_option("--features", o.features,
                  "Feature columns in model order (default: all other columns)")
      ->delimiter(',');
}

TabularInput load_tabular(const fs::path& path, const SchemaOptions& o) {
  if (!fs::is_regular_file(path)) {
    throw ValidationError("tabular data must be a CSV file: " + path.string());
  }
  const std::string text = io::read_text(path);
  TabularInput in;
  in.schema.id_column = o.id_column;
  in.schema.label_column = o.label_column;
  if (!o.features.empty()) {
    in.schema.feature_columns = o.features;
  } else {
    const auto lines = io::split_lines(text);
    if (lines.empty()) throw SchemaError("empty CSV file: " + path.string());
    for (const auto& col : io::split_csv_line(lines.front())) {
      if (col != o.id_column && col != o.label_column) in.schema.feature_columns.push_back(col);
    }
  }
  const auto n = in.schema.feature_columns.size();
  if (n != 5 && n != 10) {
    throw SchemaError("expected 5 (Module 2) or 10 (Module 3) feature columns, found " +
                      std::to_string(n));
  }
  in.module = n == 5 ? AdosModule::Module2 : AdosModule::Module3;
  in.data = parse_ados_csv(text, in.schema, in.module);
  return in;
}

Dataset load_images(const fs::path& path) {
  if (!fs::is_directory(path)) {
    throw ValidationError("image data must be a directory with index.csv: " + path.string());
  }
  return load_image_dataset(path);
}

// Module decisions: ASD iff p > 0.5.
std::vector<std::pair<Label, Label>> pairs_for(const Dataset& d, std::span<const double> probs) {
  std::vector<std::pair<Label, Label>> out;
  for (std::size_t i = 0; i < d.size(); ++i) {
    out.emplace_back(probs[i] > 0.5 ? Label::ASD : Label::NonASD, d.samples()[i].label);
  }
  return out;
}

std::vector<PredictionScore> scores_for(const Dataset& d, std::span<const double> probs,
                                        ModuleId module) {
  std::vector<PredictionScore> out;
  for (std::size_t i = 0; i < d.size(); ++i) {
    out.push_back(PredictionScore{d.samples()[i].subject_id, module, probs[i]});
  }
  return out;
}

void fill_evaluation(RunReport& r, const std::vector<std::pair<Label, Label>>& pairs) {
  r.confusion = confusion(pairs);
  r.metrics = metrics(r.confusion);
}

// ---------------------------------------------------------------------------
// synth

struct SynthOptions {
  std::string kind;
  SynthesisConfig cfg;
  std::string module;
  RunOptions run;
};

void cmd_synth(const SynthOptions& o, const CLI::App* sub, const fs::path& root,
               std::ostream& out) {
  SynthesisConfig cfg = o.cfg;
  if (!o.module.empty()) cfg.feature_count = feature_count(parse_ados_module(o.module));
  const bool tabular = o.kind == "tabular";
  if (tabular) cfg.validate_tabular();
  else cfg.validate_image();

  const fs::path dir = prepare_run_dir(root, run_id_or_derived(o.run, sub, "synth-" + o.kind),
                                       o.run.overwrite);
  json files = json::object();
  Provenance prov;
  if (tabular) {
    const auto records = synth_tabular_records(cfg);
    const AdosModule module = cfg.feature_count == 5 ? AdosModule::Module2 : AdosModule::Module3;
    const std::string csv = serialize_ados_csv(records, CsvSchema::for_module(module));
    io::write_atomic(dir / "dataset.csv", csv);
    files["dataset.csv"] = io::sha256_hex(csv);
    prov = records_to_dataset(records, default_codebook(module)).provenance();
  } else {
    const Dataset d = synth_images(cfg);
    write_image_dataset(d, dir / "images");
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir / "images")) {
      names.push_back(e.path().filename().string());
    }
    for (const auto& name : names) {
      files["images/" + name] = io::sha256_hex(io::read_bytes(dir / "images" / name));
    }
    prov = d.provenance();
  }
  json config = {{"n_samples", cfg.n_samples},          {"asd_fraction", cfg.asd_fraction},
                 {"class_separation", cfg.class_separation}, {"seed", cfg.seed}};
  if (tabular) {
    config["feature_count"] = cfg.feature_count;
  } else {
    config["image_height"] = cfg.image_height;
    config["image_width"] = cfg.image_width;
    config["image_channels"] = cfg.image_channels;
  }
  const json manifest = {{"command", "synth"},   {"kind", o.kind},
                         {"seed", cfg.seed},     {"config", config},
                         {"files", files},       {"provenance", provenance_json(prov)}};
  io::write_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
  out << dir.string() << "\n";
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  std::string data;
  std::string model;
  std::uint64_t seed = 0;
  double split = 0.8;
  bool stratified = false;
  std::optional<double> lr;
  std::optional<int> epochs;
  double l2 = 0.0;
  double svm_lambda = 0.01;
  int batch_size = 32;
  int patience = 3;
  double decay = 0.5;
  double min_lr = 1e-5;
  std::optional<std::uint64_t> init_seed;
  std::string augment_validation;
  SchemaOptions schema;
  RunOptions run;
};

void train_linear_cmd(const TrainOptions& o, const CLI::App* sub, const fs::path& root,
                      std::ostream& out, const Stopwatch& clock) {
  const LinearKind kind = parse_linear_kind(o.model);
  const TabularInput in = load_tabular(o.data, o.schema);
  TabularHyper h;
  h.learning_rate = o.lr.value_or(h.learning_rate);
  h.epochs = o.epochs.value_or(h.epochs);
  h.l2 = o.l2;
  h.svm_lambda = o.svm_lambda;
  h.seed = o.seed;
  h.validate();

  const auto split = split_dataset(in.data, o.split, o.seed, SplitOptions{o.stratified});
  const LinearModel m = train_linear(split.train, h, kind);
  std::vector<double> probs;
  for (const auto& s : split.test.samples()) {
    probs.push_back(predict_proba(m, std::get<FeatureVector>(s.input)));
  }

  RunReport r;
  r.run_id = run_id_or_derived(o.run, sub, "train-" + o.model);
  r.module = o.model;
  r.datasets = {{"train", split.train.provenance()}, {"test", split.test.provenance()}};
  r.hyperparameters = {{"model", o.model},
                       {"data", o.data},
                       {"ados_module", std::string(to_string(in.module))},
                       {"seed", o.seed},
                       {"split_ratio", o.split},
                       {"stratified", o.stratified},
                       {"learning_rate", h.learning_rate},
                       {"epochs", h.epochs},
                       {"l2", h.l2}};
  if (kind == LinearKind::LinearSvm) r.hyperparameters["svm_lambda"] = h.svm_lambda;
  fill_evaluation(r, pairs_for(split.test, probs));
  r.metadata = run_metadata(clock);

  json model = json::parse(save_linear_model(m));
  model["schema"] = {{"id_column", in.schema.id_column},
                     {"label_column", in.schema.label_column},
                     {"feature_columns", in.schema.feature_columns},
                     {"ados_module", std::string(to_string(in.module))}};

  const fs::path dir = prepare_run_dir(root, r.run_id, o.run.overwrite);
  io::write_atomic(dir / "model.json", model.dump(2) + "\n");
  io::write_atomic(dir / "scores.csv",
                   scores_to_csv(scores_for(split.test, probs, ModuleId::Tabular)));
  io::write_atomic(dir / "report.json", emit_report(r));
  out << render_summary(r) << dir.string() << "\n";
}

void train_cnn_cmd(const TrainOptions& o, const CLI::App* sub, const fs::path& root,
                   std::ostream& out, const Stopwatch& clock) {
  const Dataset all = load_images(o.data);
  NetConfig cfg = NetConfig::default_dense();
  cfg.init_seed = o.init_seed.value_or(o.seed);
  cfg.batch_size = o.batch_size;
  cfg.epochs = o.epochs.value_or(cfg.epochs);
  cfg.initial_lr = o.lr.value_or(cfg.initial_lr);
  cfg.callback = CallbackConfig{o.decay, o.patience, o.min_lr};
  cfg.validate();

  // The held-out part is halved into validation (callback) and test (report).
  const auto outer = split_dataset(all, o.split, o.seed, SplitOptions{o.stratified});
  const auto inner = split_dataset(outer.test, 0.5, o.seed, SplitOptions{o.stratified});
  Dataset val = inner.train;
  std::vector<std::string> notes;
  if (!o.augment_validation.empty()) {
    auto aug = augment_validation(val, load_images(o.augment_validation));
    val = std::move(aug.dataset);
    if (!aug.duplicate_ids.empty()) {
      std::string msg = "augmentation repeats validation subjects:";
      for (const auto& id : aug.duplicate_ids) msg += " " + id;
      notes.push_back(msg);
    }
  }
  const Dataset& test = inner.test;

  const TrainedNet trained = train_net(outer.train, val, cfg);
  const NetEvaluation eval = evaluate_net(trained.net, test);
  const std::vector<double> probs(eval.probabilities.data(),
                                  eval.probabilities.data() + eval.probabilities.size());

  RunReport r;
  r.run_id = run_id_or_derived(o.run, sub, "train-cnn");
  r.module = "cnn";
  r.datasets = {{"train", outer.train.provenance()},
                {"validation", val.provenance()},
                {"test", test.provenance()}};
  json layers = json::array();
  for (const auto& l : cfg.layers) layers.push_back(describe(l));
  r.hyperparameters = {{"model", "cnn"},
                       {"data", o.data},
                       {"seed", o.seed},
                       {"init_seed", cfg.init_seed},
                       {"split_ratio", o.split},
                       {"stratified", o.stratified},
                       {"layers", layers},
                       {"batch_size", cfg.batch_size},
                       {"epochs", cfg.epochs},
                       {"initial_lr", cfg.initial_lr},
                       {"lr_decay_factor", cfg.callback.lr_decay_factor},
                       {"patience", cfg.callback.patience},
                       {"min_lr", cfg.callback.min_lr},
                       {"best_epoch", trained.best_epoch},
                       {"best_val_accuracy", trained.best_val_accuracy}};
  if (!o.augment_validation.empty()) r.hyperparameters["augment_validation"] = o.augment_validation;
  fill_evaluation(r, pairs_for(test, probs));
  r.notes = notes;
  r.metadata = run_metadata(clock);

  const NetArtifacts art = save_net(trained);
  const fs::path dir = prepare_run_dir(root, r.run_id, o.run.overwrite);
  io::write_atomic(dir / "params.bin", std::span<const std::uint8_t>(art.blob));
  io::write_atomic(dir / "model.json", art.manifest);
  io::write_atomic(dir / "history.csv", history_to_csv(trained.history));
  io::write_atomic(dir / "scores.csv", scores_to_csv(scores_for(test, probs, ModuleId::Image)));
  io::write_atomic(dir / "report.json", emit_report(r));
  out << render_summary(r) << dir.string() << "\n";
}

// ---------------------------------------------------------------------------
// sweep

struct SweepOptions {
  std::string data;
  std::string model = "logreg";
  std::string grid = kDefaultGrid;
  std::uint64_t seed = 0;
  double split = 0.8;
  int epochs = TabularHyper{}.epochs;
  double l2 = 0.0;
  double svm_lambda = 0.01;
  SchemaOptions schema;
  RunOptions run;
};

void cmd_sweep(const SweepOptions& o, const CLI::App* sub, const fs::path& root,
               std::ostream& out, const Stopwatch& clock) {
  const LinearKind kind = parse_linear_kind(o.model);
  const std::vector<double> grid = parse_grid(o.grid);
  const TabularInput in = load_tabular(o.data, o.schema);
  TabularHyper h;
  h.epochs = o.epochs;
  h.l2 = o.l2;
  h.svm_lambda = o.svm_lambda;
  h.seed = o.seed;
  h.validate();

  const SweepResult s = lr_sweep(in.data, grid, h, kind, o.split);

  // Re-train at the best rate on the sweep's split to report its confusion matrix.
  const auto split = split_dataset(in.data, o.split, o.seed);
  h.learning_rate = s.best_rate;
  const LinearModel m = train_linear(split.train, h, kind);
  std::vector<double> probs;
  for (const auto& smp : split.test.samples()) {
    probs.push_back(predict_proba(m, std::get<FeatureVector>(smp.input)));
  }

  RunReport r;
  r.run_id = run_id_or_derived(o.run, sub, "sweep-" + o.model);
  r.module = "sweep";
  r.datasets = {{"train", split.train.provenance()}, {"test", split.test.provenance()}};
  r.hyperparameters = {{"model", o.model},     {"data", o.data},
                       {"seed", o.seed},       {"split_ratio", o.split},
                       {"epochs", h.epochs},   {"l2", h.l2},
                       {"grid", s.grid},       {"accuracies", s.accuracies},
                       {"best_rate", s.best_rate}};
  if (kind == LinearKind::LinearSvm) r.hyperparameters["svm_lambda"] = h.svm_lambda;
  fill_evaluation(r, pairs_for(split.test, probs));
  r.notes.push_back("metrics are those of the model trained at best_rate " +
                    io::format_double(s.best_rate));
  r.metadata = run_metadata(clock);

  const fs::path dir = prepare_run_dir(root, r.run_id, o.run.overwrite);
  io::write_atomic(dir / "sweep.csv", sweep_to_csv(s));
  io::write_atomic(dir / "report.json", emit_report(r));
  out << sweep_to_csv(s) << "best_rate " << io::format_double(s.best_rate) << "\n"
      << dir.string() << "\n";
}

// ---------------------------------------------------------------------------
// fuse

struct FuseOptions {
  std::string tab_scores;
  std::string img_scores;
  std::string labels;
  std::string tab_model;
  std::string img_model;
  std::string tab_data;
  std::string img_data;
  std::vector<std::string> strategies = {"simple", "by-train-count", "by-asd-count"};
  double threshold = kDefaultThreshold;
  std::optional<std::size_t> tab_train_count;
  std::optional<std::size_t> img_train_count;
  std::optional<std::size_t> tab_asd_count;
  std::optional<std::size_t> img_asd_count;
  RunOptions run;
};

struct LoadedModel {
  std::string kind;
  TrainingProvenance provenance;
  json doc;
};

LoadedModel read_model(const fs::path& path) {
  json doc;
  try {
    doc = json::parse(io::read_text(path));
  } catch (const json::exception& e) {
    throw ValidationError("model file " + path.string() + " is not valid JSON: " + e.what());
  }
  LoadedModel m;
  try {
    m.kind = doc.at("kind").get<std::string>();
    m.provenance = TrainingProvenance{doc.at("provenance").at("n_train").get<std::size_t>(),
                                      doc.at("provenance").at("n_asd_train").get<std::size_t>()};
  } catch (const json::exception& e) {
    throw ValidationError("model file " + path.string() + ": " + e.what());
  }
  m.doc = std::move(doc);
  return m;
}

std::map<std::string, Label> read_labels(const fs::path& path) {
  const auto lines = io::split_lines(io::read_text(path));
  if (lines.empty() ||
      io::split_csv_line(lines.front()) != std::vector<std::string>{"subject_id", "label"}) {
    throw SchemaError("label file must start with header subject_id,label");
  }
  std::map<std::string, Label> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto f = io::split_csv_line(lines[i]);
    if (f.size() != 2) throw ValidationError("label file row " + std::to_string(i) + ": expected 2 fields");
    Label l;
    if (f[1] == "ASD") l = Label::ASD;
    else if (f[1] == "NonASD") l = Label::NonASD;
    else throw ValidationError("label file row " + std::to_string(i) + ": unknown label '" + f[1] + "'");
    if (!out.emplace(f[0], l).second) {
      throw ValidationError("label file lists subject '" + f[0] + "' twice");
    }
  }
  return out;
}

struct ModuleScores {
  std::vector<PredictionScore> tab;
  std::vector<PredictionScore> img;
  std::map<std::string, Label> labels;  // may be empty
  std::optional<TrainingProvenance> tab_prov;
  std::optional<TrainingProvenance> img_prov;
};

ModuleScores scores_from_models(const FuseOptions& o) {
  ModuleScores s;
  const LoadedModel tm = read_model(o.tab_model);
  const LoadedModel im = read_model(o.img_model);
  if (tm.kind != "logreg" && tm.kind != "svm") {
    throw ValidationError("--tab-model must be a logreg or svm model, got " + tm.kind);
  }
  if (im.kind != "cnn") throw ValidationError("--img-model must be a cnn model, got " + im.kind);
  s.tab_prov = tm.provenance;
  s.img_prov = im.provenance;

  SchemaOptions schema;
  try {
    const auto& sc = tm.doc.at("schema");
    schema.id_column = sc.at("id_column").get<std::string>();
    schema.label_column = sc.at("label_column").get<std::string>();
    schema.features = sc.at("feature_columns").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw ValidationError("tabular model lacks its column schema: " + std::string(e.what()));
  }
  const TabularInput tab = load_tabular(o.tab_data, schema);
  const LinearModel lin = load_linear_model(tm.doc.dump());
  for (const auto& smp : tab.data.samples()) {
    s.tab.push_back(PredictionScore{smp.subject_id, ModuleId::Tabular,
                                    predict_proba(lin, std::get<FeatureVector>(smp.input))});
  }

  const fs::path blob_path = fs::path(o.img_model).parent_path() / "params.bin";
  const TrainedNet net = load_net(io::read_text(o.img_model), io::read_bytes(blob_path));
  const Dataset images = load_images(o.img_data);
  const NetEvaluation eval = evaluate_net(net.net, images);
  for (std::size_t i = 0; i < images.size(); ++i) {
    s.img.push_back(PredictionScore{images.samples()[i].subject_id, ModuleId::Image,
                                    eval.probabilities[static_cast<Eigen::Index>(i)]});
  }

  // Labels come from the data when every subject has one, and both sides agree.
  std::map<std::string, Label> labels;
  bool complete = true;
  for (const auto& smp : tab.data.samples()) {
    if (smp.label == Label::Unlabeled) complete = false;
    labels[smp.subject_id] = smp.label;
  }
  for (const auto& smp : images.samples()) {
    const auto it = labels.find(smp.subject_id);
    if (it != labels.end() && smp.label != Label::Unlabeled && it->second != smp.label) {
      throw PairingError("subject '" + smp.subject_id +
                         "' carries different labels in the tabular and image data");
    }
  }
  if (complete) s.labels = std::move(labels);
  return s;
}

ModuleScores scores_from_files(const FuseOptions& o) {
  ModuleScores s;
  s.tab = parse_scores_csv(io::read_text(o.tab_scores));
  s.img = parse_scores_csv(io::read_text(o.img_scores));
  for (const auto& p : s.tab) {
    if (p.module != ModuleId::Tabular) throw ValidationError("--tab-scores holds image scores");
  }
  for (const auto& p : s.img) {
    if (p.module != ModuleId::Image) throw ValidationError("--img-scores holds tabular scores");
  }
  if (!o.tab_model.empty()) s.tab_prov = read_model(o.tab_model).provenance;
  if (!o.img_model.empty()) s.img_prov = read_model(o.img_model).provenance;
  if (!o.labels.empty()) s.labels = read_labels(o.labels);
  return s;
}

TrainingProvenance resolve_provenance(std::optional<TrainingProvenance> base,
                                      std::optional<std::size_t> n_train,
                                      std::optional<std::size_t> n_asd, const char* side,
                                      bool needed) {
  if (n_train || n_asd) {
    if (!base && !(n_train && n_asd)) {
      throw ValidationError(std::string("--") + side + "-train-count and --" + side +
                            "-asd-count must be given together without a model");
    }
    TrainingProvenance p = base.value_or(TrainingProvenance{});
    if (n_train) p.n_train = *n_train;
    if (n_asd) p.n_asd_train = *n_asd;
    return p;
  }
  if (!base && needed) {
    throw ValidationError(std::string("weighted strategies need the ") + side +
                          " model or explicit --" + side + "-train-count/--" + side +
                          "-asd-count");
  }
  return base.value_or(TrainingProvenance{});
}

void cmd_fuse(const FuseOptions& o, const CLI::App* sub, const fs::path& root, std::ostream& out,
              const Stopwatch& clock) {
  if (!(o.threshold > 0.0 && o.threshold < 1.0)) throw ValidationError("threshold must lie in (0,1)");
  std::vector<FusionStrategy> strategies;
  for (const auto& name : o.strategies) strategies.push_back(parse_fusion_strategy(name));
  bool weighted = false;
  for (auto st : strategies) weighted = weighted || st != FusionStrategy::Simple;

  const bool from_files = !o.tab_scores.empty() || !o.img_scores.empty();
  const bool from_models = !o.tab_data.empty() || !o.img_data.empty();
  if (from_files == from_models) {
    throw ValidationError(
        "give either --tab-scores and --img-scores, or --tab-model/--tab-data and "
        "--img-model/--img-data");
  }
  if (from_files && (o.tab_scores.empty() || o.img_scores.empty())) {
    throw ValidationError("--tab-scores and --img-scores must be given together");
  }
  if (from_models &&
      (o.tab_data.empty() || o.img_data.empty() || o.tab_model.empty() || o.img_model.empty())) {
    throw ValidationError("model mode needs --tab-model, --tab-data, --img-model and --img-data");
  }
  if (from_models && !o.labels.empty()) {
    throw ValidationError("--labels only applies to score files; model mode reads labels from the data");
  }

  const ModuleScores s = from_files ? scores_from_files(o) : scores_from_models(o);
  const TrainingProvenance tab_prov =
      resolve_provenance(s.tab_prov, o.tab_train_count, o.tab_asd_count, "tab", weighted);
  const TrainingProvenance img_prov =
      resolve_provenance(s.img_prov, o.img_train_count, o.img_asd_count, "img", weighted);

  // Per-module confusion, used for the module-level averaging note.
  std::optional<MetricTriple> m_tab;
  std::optional<MetricTriple> m_img;
  auto module_metrics = [&](const std::vector<PredictionScore>& scores) {
    std::vector<std::pair<Label, Label>> pairs;
    for (const auto& p : scores) {
      pairs.emplace_back(p.p > 0.5 ? Label::ASD : Label::NonASD, s.labels.at(p.subject_id));
    }
    return metrics(confusion(pairs));
  };

  const std::string run_id = run_id_or_derived(o.run, sub, "fuse");
  struct Output {
    std::string name;
    std::string decisions;
    RunReport report;
  };
  std::vector<Output> outputs;
  for (const FusionStrategy st : strategies) {
    const auto decisions = run_hybrid(s.tab, s.img, st, tab_prov, img_prov, o.threshold);
    RunReport r;
    r.run_id = run_id + "-" + std::string(to_string(st));
    r.module = "hybrid";
    const FusionWeights w = decisions.empty() ? weights_for(st, tab_prov, img_prov)
                                              : decisions.front().weights;
    r.hybrid = HybridInfo{std::string(to_string(st)), w.w_tabular, w.w_image, o.threshold};
    r.hyperparameters = {{"strategy", std::string(to_string(st))},
                         {"threshold", o.threshold},
                         {"tabular_provenance",
                          {{"n_train", tab_prov.n_train}, {"n_asd_train", tab_prov.n_asd_train}}},
                         {"image_provenance",
                          {{"n_train", img_prov.n_train}, {"n_asd_train", img_prov.n_asd_train}}},
                         {"subjects", decisions.size()}};
    if (!s.labels.empty()) {
      std::vector<std::pair<Label, Label>> pairs;
      std::vector<Sample> labelled;
      for (const auto& d : decisions) {
        const auto it = s.labels.find(d.subject_id);
        if (it == s.labels.end()) {
          throw PairingError("no label for subject '" + d.subject_id + "'");
        }
        pairs.emplace_back(d.label, it->second);
        labelled.push_back(Sample{d.subject_id, FeatureVector(), it->second});
      }
      r.datasets["fused"] = count_labels(labelled);
      fill_evaluation(r, pairs);
      if (!m_tab) {
        m_tab = module_metrics(s.tab);
        m_img = module_metrics(s.img);
      }
      auto triple_json = [](const MetricTriple& m) {
        auto v = [](const std::optional<double>& x) { return x ? json(*x) : json(nullptr); };
        return json{{"accuracy", v(m.accuracy)},
                    {"sensitivity", v(m.sensitivity)},
                    {"precision", v(m.precision)}};
      };
      r.hyperparameters["module_metrics"] = {{"tabular", triple_json(*m_tab)},
                                             {"image", triple_json(*m_img)}};
      try {
        const MetricTriple avg = aggregate_metrics(*m_tab, *m_img, w);
        r.hyperparameters["module_metrics"]["weighted_average"] = triple_json(avg);
        r.notes.push_back("averaging module metrics under these weights gives accuracy " +
                          format_percent(avg.accuracy) + ", sensitivity " +
                          format_percent(avg.sensitivity) + ", precision " +
                          format_percent(avg.precision) +
                          "; the fused metrics above come from per-subject fused decisions");
      } catch (const ValidationError& e) {
        r.notes.push_back(std::string("module-level averaging not reported: ") + e.what());
      }
    } else {
      r.notes.push_back("no labels supplied; metrics are undefined");
    }
    r.metadata = run_metadata(clock);
    outputs.push_back(Output{std::string(to_string(st)), decisions_to_csv(decisions), r});
  }

  const fs::path dir = prepare_run_dir(root, run_id, o.run.overwrite);
  if (from_models) {
    io::write_atomic(dir / "scores-tabular.csv", scores_to_csv(s.tab));
    io::write_atomic(dir / "scores-image.csv", scores_to_csv(s.img));
  }
  for (const auto& out_item : outputs) {
    io::write_atomic(dir / ("decisions-" + out_item.name + ".csv"), out_item.decisions);
    io::write_atomic(dir / ("report-" + out_item.name + ".json"), emit_report(out_item.report));
    out << render_summary(out_item.report);
  }
  out << dir.string() << "\n";
}

// ---------------------------------------------------------------------------
// report

struct ReportOptions {
  std::vector<std::string> files;
  std::string format = "text";
  std::string output;
};

void cmd_report(const ReportOptions& o, std::ostream& out) {
  std::vector<RunReport> reports;
  for (const auto& f : o.files) {
    try {
      reports.push_back(parse_report(io::read_text(f)));
    } catch (const ValidationError& e) {
      throw ValidationError(f + ": " + e.what());
    }
  }
  std::string text;
  if (o.format == "csv") {
    text = metrics_table_csv(reports);
  } else {
    for (const auto& r : reports) text += render_summary(r);
  }
  if (o.output.empty()) out << text;
  else io::write_atomic(o.output, text);
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Autism pre-screening toolkit: synthetic data, tabular and image models, hybrid fusion."};
  app.name("asdscreen");
  app.set_config("--config", "", "Read options from a TOML/INI file ([command] sections)");
  app.require_subcommand(1);
  std::string out_root;
  app.add_option("--out-root", out_root,
                 std::string("Directory that receives run directories (default: $") +
                     kOutputRootEnv + " or ./runs)");

  SynthOptions so;
  auto* synth = app.add_subcommand("synth", "Generate a seeded synthetic dataset");
  synth->add_option("--kind", so.kind, "tabular or image")
      ->required()
      ->check(CLI::IsMember({"tabular", "image"}));
  synth->add_option("--n", so.cfg.n_samples, "Number of subjects")->capture_default_str();
  synth->add_option("--asd-fraction", so.cfg.asd_fraction, "Fraction of ASD subjects")
      ->capture_default_str();
  synth->add_option("--features", so.cfg.feature_count, "Tabular feature count (5 or 10)")
      ->capture_default_str();
  synth->add_option("--module", so.module, "ADOS module (Module2 or Module3); sets --features");
  synth->add_option("--separation", so.cfg.class_separation, "Class separation (0: no signal)")
      ->capture_default_str();
  synth->add_option("--seed", so.cfg.seed, "Random seed")->required();
  synth->add_option("--height", so.cfg.image_height, "Image height")->capture_default_str();
  synth->add_option("--width", so.cfg.image_width, "Image width")->capture_default_str();
  synth->add_option("--channels", so.cfg.image_channels, "Image channels (1 or 3)")
      ->capture_default_str();
  add_run_options(synth, so.run);

  TrainOptions to;
  auto* train = app.add_subcommand("train", "Split, train and evaluate one model");
  train->add_option("--data", to.data, "Tabular CSV file or image directory")
      ->required()
      ->check(CLI::ExistingPath);
  train->add_option("--model", to.model, "logreg, svm or cnn")
      ->required()
      ->check(CLI::IsMember({"logreg", "svm", "cnn"}));
  train->add_option("--seed", to.seed, "Seed for the split and initialisation")->required();
  train->add_option("--split", to.split, "Training fraction")->capture_default_str();
  train->add_flag("--stratified", to.stratified, "Preserve the class ratio in the split");
  train->add_option("--lr", to.lr, "Learning rate (default 0.5 linear, 0.05 cnn)");
  train->add_option("--epochs", to.epochs, "Epochs (default 500 linear, 20 cnn)");
  train->add_option("--l2", to.l2, "L2 penalty for logistic regression")->capture_default_str();
  train->add_option("--svm-lambda", to.svm_lambda, "SVM regularisation")->capture_default_str();
  train->add_option("--batch-size", to.batch_size, "CNN mini-batch size")->capture_default_str();
  train->add_option("--patience", to.patience, "Epochs without improvement before decay")
      ->capture_default_str();
  train->add_option("--decay", to.decay, "Learning-rate decay factor")->capture_default_str();
  train->add_option("--min-lr", to.min_lr, "Learning-rate floor")->capture_default_str();
  train->add_option("--init-seed", to.init_seed, "CNN initialisation seed (default --seed)");
  train->add_option("--augment-validation", to.augment_validation,
                    "Image directory appended to the CNN validation set")
      ->check(CLI::ExistingDirectory);
  add_schema_options(train, to.schema);
  add_run_options(train, to.run);

  SweepOptions wo;
  auto* sweep = app.add_subcommand("sweep", "Test accuracy across a learning-rate grid");
  sweep->add_option("--data", wo.data, "Tabular CSV file")->required()->check(CLI::ExistingFile);
  sweep->add_option("--model", wo.model, "logreg or svm")
      ->capture_default_str()
      ->check(CLI::IsMember({"logreg", "svm"}));
  sweep->add_option("--grid", wo.grid, "Strictly increasing comma-separated rates")
      ->capture_default_str();
  sweep->add_option("--seed", wo.seed, "Split seed")->required();
  sweep->add_option("--split", wo.split, "Training fraction")->capture_default_str();
  sweep->add_option("--epochs", wo.epochs, "Epochs per grid point")->capture_default_str();
  sweep->add_option("--l2", wo.l2, "L2 penalty for logistic regression")->capture_default_str();
  sweep->add_option("--svm-lambda", wo.svm_lambda, "SVM regularisation")->capture_default_str();
  add_schema_options(sweep, wo.schema);
  add_run_options(sweep, wo.run);

  FuseOptions fo;
  auto* fuse_cmd = app.add_subcommand("fuse", "Combine tabular and image scores per subject");
  fuse_cmd->add_option("--tab-scores", fo.tab_scores, "Tabular score CSV")
      ->check(CLI::ExistingFile);
  fuse_cmd->add_option("--img-scores", fo.img_scores, "Image score CSV")
      ->check(CLI::ExistingFile);
  fuse_cmd->add_option("--labels", fo.labels, "subject_id,label CSV for score files")
      ->check(CLI::ExistingFile);
  fuse_cmd->add_option("--tab-model", fo.tab_model, "Tabular model.json")
      ->check(CLI::ExistingFile);
  fuse_cmd->add_option("--img-model", fo.img_model, "CNN model.json (params.bin alongside)")
      ->check(CLI::ExistingFile);
  fuse_cmd->add_option("--tab-data", fo.tab_data, "Paired tabular CSV")
      ->check(CLI::ExistingFile);
  fuse_cmd->add_option("--img-data", fo.img_data, "Paired image directory")
      ->check(CLI::ExistingDirectory);
  fuse_cmd->add_option("--strategy", fo.strategies,
                       "simple, by-train-count, by-asd-count (repeatable)")
      ->capture_default_str()
      ->delimiter(',');
  fuse_cmd->add_option("--threshold", fo.threshold, "ASD iff fused probability >= threshold")
      ->capture_default_str();
  fuse_cmd->add_option("--tab-train-count", fo.tab_train_count, "Override tabular n_train");
  fuse_cmd->add_option("--img-train-count", fo.img_train_count, "Override image n_train");
  fuse_cmd->add_option("--tab-asd-count", fo.tab_asd_count, "Override tabular ASD count");
  fuse_cmd->add_option("--img-asd-count", fo.img_asd_count, "Override image ASD count");
  add_run_options(fuse_cmd, fo.run);

  ReportOptions ro;
  auto* report = app.add_subcommand("report", "Render or compare stored run reports");
  report->add_option("files", ro.files, "report.json files")
      ->required()
      ->check(CLI::ExistingFile);
  report->add_option("--format", ro.format, "text or csv")
      ->capture_default_str()
      ->check(CLI::IsMember({"text", "csv"}));
  report->add_option("--output", ro.output, "Write to this file instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }

  const Stopwatch clock;
  fs::path root = "runs";
  if (!out_root.empty()) {
    root = out_root;
  } else if (const char* env = std::getenv(kOutputRootEnv); env != nullptr && *env != '\0') {
    root = env;
  }

  try {
    if (*synth) {
      cmd_synth(so, synth, root, out);
    } else if (*train) {
      if (to.model == "cnn") train_cnn_cmd(to, train, root, out, clock);
      else train_linear_cmd(to, train, root, out, clock);
    } else if (*sweep) {
      cmd_sweep(wo, sweep, root, out, clock);
    } else if (*fuse_cmd) {
      cmd_fuse(fo, fuse_cmd, root, out, clock);
    } else if (*report) {
      cmd_report(ro, out);
    }
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << " (step " << e.step() << ")\n";
    return kExitNumerical;
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  }
  return kExitOk;
}

}  // namespace asdscreen::cli
