#include "asdscreen/ingest.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include "asdscreen/io_util.hpp"

namespace asdscreen {

namespace {

std::string label_token(Label label, const CsvSchema& schema) {
  for (const auto& [token, l] : schema.label_encoding) {
    if (l == label) return token;
  }
  if (label == Label::Unlabeled) return "";
  throw ValidationError("no token encodes label " + std::string(to_string(label)));
}

bool is_space(std::uint8_t c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

// Reads one unsigned decimal header token starting at pos, skipping leading
// whitespace and '#' comment lines.
std::uint64_t read_header_int(std::span<const std::uint8_t> bytes, std::size_t& pos,
                              const char* what) {
  while (pos < bytes.size()) {
    if (is_space(bytes[pos])) {
      ++pos;
    } else if (bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else {
      break;
    }
  }
  const std::size_t start = pos;
  std::uint64_t value = 0;
  while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
    value = value * 10 + (bytes[pos] - '0');
    if (value > (1u << 24)) throw DecodeError(std::string(what) + " is too large", start);
    ++pos;
  }
  if (pos == start) throw DecodeError(std::string("expected ") + what, start);
  return value;
}

std::vector<std::string> default_codes(std::size_t count) {
  if (count == 5) return {"A1", "A2", "B1", "B2", "B3"};
  if (count == 10) return {"A1", "A2", "A3", "A4", "A5", "B1", "B2", "B3", "B4", "B5"};
  throw ValidationError("feature_count must be 5 or 10, got " + std::to_string(count));
}

// Standard normal deviate by Box-Muller over unit_uniform draws.
double normal_draw(std::mt19937_64& rng) {
  const double u1 = unit_uniform(rng);
  const double u2 = unit_uniform(rng);
  return std::sqrt(-2.0 * std::log1p(-u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

constexpr std::uint64_t kTabularStream = 0x9E3779B97F4A7C15ULL;
constexpr std::uint64_t kImageStream = 0xC2B2AE3D27D4EB4FULL;

}  // namespace

void CsvSchema::validate() const {
  if (feature_columns.empty()) throw SchemaError("schema declares no feature columns");
  std::set<std::string> seen;
  for (const auto& c : feature_columns) {
    if (!seen.insert(c).second) throw SchemaError("duplicate feature column '" + c + "'");
  }
  if (id_column == label_column || seen.contains(id_column) || seen.contains(label_column)) {
    throw SchemaError("id, label and feature column names must be distinct");
  }
  if (label_encoding.empty()) throw SchemaError("schema declares no label tokens");
}

CsvSchema CsvSchema::for_module(AdosModule module) {
  CsvSchema s;
  s.feature_columns = default_codebook(module);
  return s;
}

std::vector<std::string> default_codebook(AdosModule module) {
  return default_codes(feature_count(module));
}

std::vector<AdosRecord> parse_ados_records(std::string_view text, const CsvSchema& schema,
                                           AdosModule module) {
  schema.validate();
  const auto lines = io::split_lines(text);
  if (lines.empty()) throw SchemaError("CSV input has no header row");
  const auto header = io::split_csv_line(lines.front());

  auto column_of = [&](const std::string& name) -> std::ptrdiff_t {
    const auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : std::distance(header.begin(), it);
  };
  std::vector<std::string> missing;
  const auto id_col = column_of(schema.id_column);
  const auto label_col = column_of(schema.label_column);
  if (id_col < 0) missing.push_back(schema.id_column);
  if (label_col < 0) missing.push_back(schema.label_column);
  std::vector<std::ptrdiff_t> feature_cols;
  for (const auto& f : schema.feature_columns) {
    feature_cols.push_back(column_of(f));
    if (feature_cols.back() < 0) missing.push_back(f);
  }
  if (!missing.empty()) {
    std::string msg = "CSV header is missing column(s):";
    for (const auto& m : missing) msg += " " + m;
    throw SchemaError(msg);
  }

  std::vector<AdosRecord> records;
  for (std::size_t li = 1; li < lines.size(); ++li) {
    const std::size_t row = li;
    const std::string where = "row " + std::to_string(row) + ": ";
    if (lines[li].empty()) {
      // Blank lines are only tolerated at the very end of the file.
      const bool trailing = std::all_of(lines.begin() + static_cast<std::ptrdiff_t>(li),
                                        lines.end(), [](const auto& l) { return l.empty(); });
      if (trailing) break;
      throw ValidationError(where + "blank line inside data section");
    }
    const auto fields = io::split_csv_line(lines[li]);
    if (fields.size() != header.size()) {
      throw ValidationError(where + "expected " + std::to_string(header.size()) +
                            " fields, got " + std::to_string(fields.size()));
    }
    Label label = Label::Unlabeled;
    const auto& token = fields[static_cast<std::size_t>(label_col)];
    if (!token.empty()) {
      const auto it = schema.label_encoding.find(token);
      if (it == schema.label_encoding.end()) {
        throw ValidationError(where + "unknown label token '" + token + "'");
      }
      label = it->second;
    }
    std::map<std::string, int> scores;
    for (std::size_t k = 0; k < feature_cols.size(); ++k) {
      const auto& cell = fields[static_cast<std::size_t>(feature_cols[k])];
      int value = 0;
      const auto [end, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), value);
      if (ec != std::errc{} || end != cell.data() + cell.size() || cell.empty()) {
        throw ValidationError(where + "non-integer score '" + cell + "' in column " +
                              schema.feature_columns[k]);
      }
      if (!is_valid_raw_score(value)) {
        throw ValidationError(where + "score " + std::to_string(value) + " in column " +
                              schema.feature_columns[k] + " is outside the bands 0-3 and 7-9");
      }
      scores.emplace(schema.feature_columns[k], value);
    }
    records.emplace_back(fields[static_cast<std::size_t>(id_col)], module, std::move(scores),
                         label);
  }
  return records;
}

Dataset parse_ados_csv(std::string_view text, const CsvSchema& schema, AdosModule module) {
  const auto records = parse_ados_records(text, schema, module);
  return records_to_dataset(records, schema.feature_columns);
}

std::string serialize_ados_csv(std::span<const AdosRecord> records, const CsvSchema& schema) {
  schema.validate();
  std::ostringstream out;
  out << schema.id_column << ',' << schema.label_column;
  for (const auto& f : schema.feature_columns) out << ',' << f;
  out << '\n';
  for (const auto& r : records) {
    out << r.subject_id() << ',' << label_token(r.label(), schema);
    for (const auto& f : schema.feature_columns) {
      const auto it = r.scores().find(f);
      if (it == r.scores().end()) {
        throw SchemaError("subject '" + r.subject_id() + "' has no score for " + f);
      }
      out << ',' << it->second;
    }
    out << '\n';
  }
  return out.str();
}

ImageTensor decode_image(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw DecodeError("bad magic number (expected P5 or P6)", 0);
  }
  const int channels = bytes[1] == '5' ? 1 : 3;
  std::size_t pos = 2;
  if (pos >= bytes.size() || !is_space(bytes[pos])) {
    throw DecodeError("expected whitespace after magic number", pos);
  }
  const auto width = read_header_int(bytes, pos, "width");
  const auto height = read_header_int(bytes, pos, "height");
  const std::size_t maxval_pos = pos;
  const auto maxval = read_header_int(bytes, pos, "maxval");
  if (maxval != 255) {
    throw DecodeError("maxval " + std::to_string(maxval) + " is not 255", maxval_pos);
  }
  if (width == 0 || height == 0) throw DecodeError("image dimensions must be positive", 3);
  if (pos >= bytes.size() || !is_space(bytes[pos])) {
    throw DecodeError("expected single whitespace after maxval", pos);
  }
  ++pos;
  const std::size_t expected = width * height * static_cast<std::size_t>(channels);
  const std::size_t available = bytes.size() - pos;
  if (available < expected) {
    throw DecodeError("truncated payload: expected " + std::to_string(expected) +
                          " bytes, got " + std::to_string(available),
                      bytes.size());
  }
  if (available > expected) {
    throw DecodeError("unexpected trailing bytes after payload", pos + expected);
  }
  VecX<double> data(static_cast<Eigen::Index>(expected));
  for (std::size_t i = 0; i < expected; ++i) {
    data[static_cast<Eigen::Index>(i)] = bytes[pos + i] / 255.0;
  }
  return ImageTensor(static_cast<int>(height), static_cast<int>(width), channels,
                     std::move(data));
}

std::vector<std::uint8_t> encode_image(const ImageTensor& image) {
  if (image.channels() != 1 && image.channels() != 3) {
    throw ValidationError("only 1- or 3-channel images can be written as PGM/PPM");
  }
  const std::string header = std::string(image.channels() == 1 ? "P5" : "P6") + "\n" +
                             std::to_string(image.width()) + " " +
                             std::to_string(image.height()) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(header.size() + static_cast<std::size_t>(image.size()));
  for (Eigen::Index i = 0; i < image.size(); ++i) {
    out.push_back(static_cast<std::uint8_t>(std::lround(image.data()[i] * 255.0)));
  }
  return out;
}

std::size_t SynthesisConfig::n_asd() const {
  return static_cast<std::size_t>(std::llround(asd_fraction * static_cast<double>(n_samples)));
}

void SynthesisConfig::validate_tabular() const {
  if (n_samples == 0) throw ValidationError("n_samples must be positive");
  if (!(asd_fraction >= 0.0 && asd_fraction <= 1.0)) {
    throw ValidationError("asd_fraction must lie in [0,1]");
  }
  if (feature_count != 5 && feature_count != 10) {
    throw ValidationError("feature_count must be 5 or 10, got " + std::to_string(feature_count));
  }
  if (!(class_separation >= 0.0) || !std::isfinite(class_separation)) {
    throw ValidationError("class_separation must be finite and >= 0");
  }
}

void SynthesisConfig::validate_image() const {
  if (n_samples == 0) throw ValidationError("n_samples must be positive");
  if (!(asd_fraction >= 0.0 && asd_fraction <= 1.0)) {
    throw ValidationError("asd_fraction must lie in [0,1]");
  }
  if (image_height < 8 || image_width < 8) {
    throw ValidationError("synthetic images must be at least 8x8");
  }
  if (image_channels != 1 && image_channels != 3) {
    throw ValidationError("image_channels must be 1 or 3");
  }
  if (!(class_separation >= 0.0) || !std::isfinite(class_separation)) {
    throw ValidationError("class_separation must be finite and >= 0");
  }
}

std::vector<Label> synth_labels(const SynthesisConfig& cfg) {
  const std::size_t n = cfg.n_samples;
  const std::size_t n_asd = cfg.n_asd();
  const auto perm = seeded_permutation(n, cfg.seed);
  std::vector<Label> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = perm[i] < n_asd ? Label::ASD : Label::NonASD;
  return labels;
}

std::string synth_subject_id(std::size_t i) {
  std::string digits = std::to_string(i);
  if (digits.size() < 6) digits.insert(0, 6 - digits.size(), '0');
  return "s" + digits;
}

std::vector<AdosRecord> synth_tabular_records(const SynthesisConfig& cfg) {
  cfg.validate_tabular();
  const auto labels = synth_labels(cfg);
  const auto codes = default_codes(cfg.feature_count);
  const AdosModule module = cfg.feature_count == 5 ? AdosModule::Module2 : AdosModule::Module3;
  const auto f = static_cast<double>(cfg.feature_count);

  // Per-feature loading in [0.5, 1]: later items discriminate less.
  std::vector<double> loading(cfg.feature_count);
  for (std::size_t j = 0; j < cfg.feature_count; ++j) {
    loading[j] = 1.0 - 0.5 * static_cast<double>(j) / (f - 1.0);
  }

  std::mt19937_64 rng(cfg.seed ^ kTabularStream);
  std::vector<AdosRecord> records;
  records.reserve(cfg.n_samples);
  for (std::size_t i = 0; i < cfg.n_samples; ++i) {
    const double sign = labels[i] == Label::ASD ? 1.0 : -1.0;
    std::map<std::string, int> scores;
    for (std::size_t j = 0; j < cfg.feature_count; ++j) {
      // P(score = k) proportional to exp(+-sep * loading * (k - 1.5)).
      std::array<double, 4> w{};
      double total = 0.0;
      for (int k = 0; k < 4; ++k) {
        w[static_cast<std::size_t>(k)] =
            std::exp(sign * cfg.class_separation * loading[j] * (k - 1.5));
        total += w[static_cast<std::size_t>(k)];
      }
      double u = unit_uniform(rng) * total;
      int score = 3;
      for (int k = 0; k < 4; ++k) {
        if (u < w[static_cast<std::size_t>(k)]) {
          score = k;
          break;
        }
        u -= w[static_cast<std::size_t>(k)];
      }
      scores.emplace(codes[j], score);
    }
    records.emplace_back(synth_subject_id(i), module, std::move(scores), labels[i]);
  }
  return records;
}

Dataset synth_tabular(const SynthesisConfig& cfg) {
  const auto records = synth_tabular_records(cfg);
  return records_to_dataset(records, default_codes(cfg.feature_count));
}

Dataset synth_images(const SynthesisConfig& cfg) {
  cfg.validate_image();
  const auto labels = synth_labels(cfg);
  const int h = cfg.image_height;
  const int w = cfg.image_width;
  const int c = cfg.image_channels;
  const double amplitude = std::min(0.55, 0.1 * cfg.class_separation);
  const double sigma = std::max(1.0, std::min(h, w) / 6.0);
  const int jitter_y = std::max(1, h / 8);
  const int jitter_x = std::max(1, w / 8);

  std::mt19937_64 rng(cfg.seed ^ kImageStream);
  std::vector<Sample> samples;
  samples.reserve(cfg.n_samples);
  for (std::size_t i = 0; i < cfg.n_samples; ++i) {
    // Blob centre is drawn for every sample so both classes consume the same
    // number of engine draws.
    const double cy = h / 2.0 + static_cast<double>(uniform_below(rng, 2 * jitter_y + 1)) -
                      jitter_y;
    const double cx = w / 2.0 + static_cast<double>(uniform_below(rng, 2 * jitter_x + 1)) -
                      jitter_x;
    const double a = labels[i] == Label::ASD ? amplitude : 0.0;
    VecX<double> data(static_cast<Eigen::Index>(h) * w * c);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double r2 = (y + 0.5 - cy) * (y + 0.5 - cy) + (x + 0.5 - cx) * (x + 0.5 - cx);
        const double blob = a * std::exp(-r2 / (2.0 * sigma * sigma));
        for (int ch = 0; ch < c; ++ch) {
          double v = 0.4 + 0.08 * normal_draw(rng) + blob;
          v = std::clamp(v, 0.0, 1.0);
          data[(static_cast<Eigen::Index>(y) * w + x) * c + ch] = std::round(v * 255.0) / 255.0;
        }
      }
    }
    samples.push_back(Sample{synth_subject_id(i), ImageTensor(h, w, c, std::move(data)),
                             labels[i]});
  }
  return Dataset(DatasetKind::Image, std::move(samples));
}

Dataset load_image_dataset(const std::filesystem::path& dir) {
  const auto index_path = dir / "index.csv";
  if (!std::filesystem::exists(index_path)) {
    throw IoError("image dataset index '" + index_path.string() + "' not found");
  }
  const auto lines = io::split_lines(io::read_text(index_path));
  if (lines.empty() || io::split_csv_line(lines.front()) !=
                           std::vector<std::string>{"subject_id", "label", "file"}) {
    throw SchemaError("index.csv must start with header subject_id,label,file");
  }
  std::vector<Sample> samples;
  for (std::size_t li = 1; li < lines.size(); ++li) {
    if (lines[li].empty()) continue;
    const auto fields = io::split_csv_line(lines[li]);
    if (fields.size() != 3) {
      throw ValidationError("index.csv row " + std::to_string(li) + ": expected 3 fields");
    }
    Label label = Label::Unlabeled;
    if (fields[1] == "ASD") {
      label = Label::ASD;
    } else if (fields[1] == "NonASD") {
      label = Label::NonASD;
    } else if (!fields[1].empty()) {
      throw ValidationError("index.csv row " + std::to_string(li) + ": unknown label '" +
                            fields[1] + "'");
    }
    const auto bytes = io::read_bytes(dir / fields[2]);
    try {
      samples.push_back(Sample{fields[0], decode_image(bytes), label});
    } catch (const DecodeError& e) {
      throw DecodeError(fields[2] + ": " + e.what(), e.offset());
    }
  }
  return Dataset(DatasetKind::Image, std::move(samples));
}

void write_image_dataset(const Dataset& d, const std::filesystem::path& dir) {
  if (d.kind() != DatasetKind::Image) throw ValidationError("not an image dataset");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  std::ostringstream index;
  index << "subject_id,label,file\n";
  for (const auto& s : d.samples()) {
    const auto& img = std::get<ImageTensor>(s.input);
    const std::string file = s.subject_id + (img.channels() == 1 ? ".pgm" : ".ppm");
    io::write_atomic(dir / file, std::span<const std::uint8_t>(encode_image(img)));
    index << s.subject_id << ','
          << (s.label == Label::Unlabeled ? std::string() : std::string(to_string(s.label)))
          << ',' << file << '\n';
  }
  io::write_atomic(dir / "index.csv", index.str());
}

}  // namespace asdscreen
