#include "asdscreen/evalreport.hpp"

#include <cmath>
#include <sstream>

#include "asdscreen/io_util.hpp"

namespace asdscreen {

namespace {

std::optional<double> ratio(std::size_t num, std::size_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

nlohmann::json optional_to_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::optional<double> optional_from_json(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

}  // namespace

ConfusionMatrix confusion(std::span<const std::pair<Label, Label>> decisions) {
  if (decisions.empty()) throw ValidationError("confusion matrix of an empty decision list");
  ConfusionMatrix c;
  for (const auto& [predicted, actual] : decisions) {
    if (predicted == Label::Unlabeled || actual == Label::Unlabeled) {
      throw ValidationError("confusion matrix needs labelled (predicted, actual) pairs");
    }
    const bool p = predicted == Label::ASD;
    const bool a = actual == Label::ASD;
    if (p && a) ++c.tp;
    else if (p) ++c.fp;
    else if (a) ++c.fn;
    else ++c.tn;
  }
  return c;
}

MetricTriple metrics(const ConfusionMatrix& c) {
  if (c.total() == 0) throw ValidationError("metrics of an empty confusion matrix");
  return MetricTriple{ratio(c.tp + c.tn, c.total()), ratio(c.tp, c.tp + c.fn),
                      ratio(c.tp, c.tp + c.fp)};
}

bool RunReport::validation_augmented() const {
  for (const auto& [name, p] : datasets) {
    if (p.validation_augmented) return true;
  }
  return false;
}

std::string emit_report(const RunReport& r) {
  nlohmann::json j;
  j["format_version"] = kReportFormatVersion;
  j["run_id"] = r.run_id;
  j["module"] = r.module;
  nlohmann::json ds = nlohmann::json::object();
  for (const auto& [name, p] : r.datasets) {
    ds[name] = {{"n_total", p.n_total},
                {"n_asd", p.n_asd},
                {"n_nonasd", p.n_nonasd},
                {"validation_augmented", p.validation_augmented}};
  }
  j["datasets"] = ds;
  j["validation_augmented"] = r.validation_augmented();
  j["hyperparameters"] = r.hyperparameters;
  j["confusion"] = {{"tp", r.confusion.tp}, {"fp", r.confusion.fp},
                    {"tn", r.confusion.tn}, {"fn", r.confusion.fn}};
  j["metrics"] = {{"accuracy", optional_to_json(r.metrics.accuracy)},
                  {"sensitivity", optional_to_json(r.metrics.sensitivity)},
                  {"precision", optional_to_json(r.metrics.precision)}};
  j["hybrid"] = r.hybrid ? nlohmann::json{{"strategy", r.hybrid->strategy},
                                          {"w_tabular", r.hybrid->w_tabular},
                                          {"w_image", r.hybrid->w_image},
                                          {"threshold", r.hybrid->threshold}}
                         : nlohmann::json(nullptr);
  j["notes"] = r.notes;
  j["metadata"] = r.metadata;
  j["summary"] = {{"accuracy", format_percent(r.metrics.accuracy)},
                  {"sensitivity", format_percent(r.metrics.sensitivity)},
                  {"precision", format_percent(r.metrics.precision)}};
  return j.dump(2) + "\n";
}

RunReport parse_report(std::string_view json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed run report: ") + e.what());
  }
  try {
    if (j.at("format_version").get<int>() != kReportFormatVersion) {
      throw ValidationError("unsupported run report format_version");
    }
    RunReport r;
    r.run_id = j.at("run_id").get<std::string>();
    r.module = j.at("module").get<std::string>();
    for (const auto& [name, p] : j.at("datasets").items()) {
      r.datasets[name] = Provenance{p.at("n_total").get<std::size_t>(),
                                    p.at("n_asd").get<std::size_t>(),
                                    p.at("n_nonasd").get<std::size_t>(),
                                    p.at("validation_augmented").get<bool>()};
    }
    r.hyperparameters = j.at("hyperparameters");
    const auto& c = j.at("confusion");
    r.confusion = ConfusionMatrix{c.at("tp").get<std::size_t>(), c.at("fp").get<std::size_t>(),
                                  c.at("tn").get<std::size_t>(), c.at("fn").get<std::size_t>()};
    const auto& m = j.at("metrics");
    r.metrics = MetricTriple{optional_from_json(m.at("accuracy")),
                             optional_from_json(m.at("sensitivity")),
                             optional_from_json(m.at("precision"))};
    if (!j.at("hybrid").is_null()) {
      const auto& h = j["hybrid"];
      r.hybrid = HybridInfo{h.at("strategy").get<std::string>(), h.at("w_tabular").get<double>(),
                            h.at("w_image").get<double>(), h.at("threshold").get<double>()};
    }
    r.notes = j.at("notes").get<std::vector<std::string>>();
    r.metadata = j.at("metadata").get<std::map<std::string, std::string>>();

    const MetricTriple expected = r.confusion.total() > 0 ? metrics(r.confusion) : MetricTriple{};
    if (expected != r.metrics) {
      throw ValidationError("report metrics disagree with its confusion matrix");
    }
    if (j.at("validation_augmented").get<bool>() != r.validation_augmented()) {
      throw ValidationError("report validation_augmented flag disagrees with its datasets");
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed run report: ") + e.what());
  }
}

std::string format_percent(std::optional<double> v) {
  if (!v) return "n/a";
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(1);
  s << *v * 100.0 << '%';
  return s.str();
}

std::string render_summary(const RunReport& r) {
  std::ostringstream s;
  s << "run " << r.run_id << " [" << r.module << "]\n";
  for (const auto& [name, p] : r.datasets) {
    s << "  " << name << ": " << p.n_total << " samples (" << p.n_asd << " ASD, " << p.n_nonasd
      << " non-ASD)" << (p.validation_augmented ? ", validation augmented" : "") << '\n';
  }
  if (r.hybrid) {
    s << "  strategy " << r.hybrid->strategy << ": w_tabular=" << io::format_double(r.hybrid->w_tabular)
      << " w_image=" << io::format_double(r.hybrid->w_image)
      << " threshold=" << io::format_double(r.hybrid->threshold) << '\n';
  }
  s << "  Accuracy " << format_percent(r.metrics.accuracy) << "  Sensitivity "
    << format_percent(r.metrics.sensitivity) << "  Precision "
    << format_percent(r.metrics.precision) << '\n';
  s << "  TP " << r.confusion.tp << "  FP " << r.confusion.fp << "  TN " << r.confusion.tn
    << "  FN " << r.confusion.fn << '\n';
  for (const auto& n : r.notes) s << "  note: " << n << '\n';
  return s.str();
}

std::string metrics_table_csv(std::span<const RunReport> reports) {
  auto cell = [](const std::optional<double>& v) {
    return v ? io::format_double(*v) : std::string("NA");
  };
  std::string out =
      "run_id,module,accuracy,sensitivity,precision,tp,fp,tn,fn,validation_augmented\n";
  for (const auto& r : reports) {
    out += r.run_id + "," + r.module + "," + cell(r.metrics.accuracy) + "," +
           cell(r.metrics.sensitivity) + "," + cell(r.metrics.precision) + "," +
           std::to_string(r.confusion.tp) + "," + std::to_string(r.confusion.fp) + "," +
           std::to_string(r.confusion.tn) + "," + std::to_string(r.confusion.fn) + "," +
           (r.validation_augmented() ? "true" : "false") + "\n";
  }
  return out;
}

}  // namespace asdscreen
