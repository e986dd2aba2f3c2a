#include "condenser/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "condenser/io_util.hpp"

namespace condenser {

namespace {

constexpr std::size_t kMeasureBatch = 16;

std::string csv_double(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

}  // namespace

double entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p < 0.0 || std::isnan(p)) throw NumericError("entropy: invalid probability");
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

std::vector<double> cls_entropy_by_layer(const std::vector<Tensor>& attentions, std::size_t row,
                                         std::size_t length) {
  std::vector<double> out;
  out.reserve(attentions.size());
  for (const auto& map : attentions) {
    const auto& s = map.shape();
    if (s.size() != 4 || s[2] != s[3]) throw ShapeError("attention map must be [B, H, T, T]");
    if (row >= s[0] || length == 0 || length > s[2])
      throw ShapeError("attention map " + shape_str(s) + " has no row " + std::to_string(row) +
                       " of length " + std::to_string(length));
    const std::size_t heads = s[1], seq = s[2];
    auto data = map.data();
    double total = 0.0;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t offset = ((row * heads + h) * seq) * seq;
      total += entropy(data.subspan(offset, length));
    }
    out.push_back(total / static_cast<double>(heads));
  }
  return out;
}

EntropyProfile summarize_entropies(const std::vector<std::vector<double>>& per_document,
                                   std::string tag) {
  EntropyProfile p;
  p.tag = std::move(tag);
  p.samples = per_document.size();
  if (per_document.empty()) return p;
  const std::size_t layers = per_document.front().size();
  p.mean.assign(layers, 0.0);
  p.stddev.assign(layers, 0.0);
  for (const auto& doc : per_document) {
    if (doc.size() != layers) throw ShapeError("entropy rows differ in layer count");
    for (std::size_t l = 0; l < layers; ++l) p.mean[l] += doc[l];
  }
  const double n = static_cast<double>(per_document.size());
  for (auto& m : p.mean) m /= n;
  if (per_document.size() > 1) {
    for (const auto& doc : per_document)
      for (std::size_t l = 0; l < layers; ++l) p.stddev[l] += (doc[l] - p.mean[l]) * (doc[l] - p.mean[l]);
    for (auto& v : p.stddev) v = std::sqrt(v / (n - 1.0));
  }
  return p;
}

EntropyProfile cls_attention_entropy(const Encoder& encoder, const text::Vocabulary& vocab,
                                     const std::vector<std::string>& documents, std::size_t max_len,
                                     std::size_t max_samples, std::string tag) {
  std::vector<std::vector<int>> rows;
  for (const auto& doc : documents) {
    if (rows.size() >= max_samples) break;
    auto ids = vocab.encode(doc, max_len);
    if (ids.size() < 3) continue;
    rows.push_back(std::move(ids));
  }
  NoGradGuard no_grad;
  ForwardOptions options;
  options.capture_attention = true;
  std::vector<std::vector<double>> per_document;
  per_document.reserve(rows.size());
  for (std::size_t start = 0; start < rows.size(); start += kMeasureBatch) {
    const std::size_t end = std::min(rows.size(), start + kMeasureBatch);
    std::vector<std::vector<int>> chunk(rows.begin() + static_cast<std::ptrdiff_t>(start),
                                        rows.begin() + static_cast<std::ptrdiff_t>(end));
    auto batch = text::TokenBatch::pad(chunk);
    auto out = encoder.encode(batch, options);
    for (std::size_t b = 0; b < chunk.size(); ++b)
      per_document.push_back(cls_entropy_by_layer(out.attentions, b, chunk[b].size()));
  }
  auto profile = summarize_entropies(per_document, std::move(tag));
  if (profile.samples == 0) {
    profile.mean.assign(encoder.config().backbone_layers(), 0.0);
    profile.stddev.assign(encoder.config().backbone_layers(), 0.0);
  }
  return profile;
}

ProfileComparison compare_profiles(const EntropyProfile& a, const EntropyProfile& b) {
  if (a.layers() != b.layers())
    throw ShapeError("profiles have " + std::to_string(a.layers()) + " and " +
                     std::to_string(b.layers()) + " layers");
  ProfileComparison c;
  c.tag_a = a.tag;
  c.tag_b = b.tag;
  double sum = 0.0;
  for (std::size_t l = 0; l < a.layers(); ++l) {
    LayerDelta d;
    d.layer = l;
    d.a = a.mean[l];
    d.b = b.mean[l];
    d.delta = d.b - d.a;
    d.relative = d.a != 0.0 ? d.delta / d.a : std::numeric_limits<double>::quiet_NaN();
    sum += std::abs(d.delta);
    c.max_abs_delta = std::max(c.max_abs_delta, std::abs(d.delta));
    c.layers.push_back(d);
  }
  if (!c.layers.empty()) c.mean_abs_delta = sum / static_cast<double>(c.layers.size());
  return c;
}

void write_profile_csv(const std::filesystem::path& path, const EntropyProfile& profile) {
  if (profile.tag.find_first_of(",\n") != std::string::npos)
    throw Error("model tag may not contain commas or newlines");
  std::string out = "layer,mean_entropy_nats,std,n_samples,model_tag\n";
  for (std::size_t l = 0; l < profile.layers(); ++l)
    out += std::to_string(l) + ',' + csv_double(profile.mean[l]) + ',' + csv_double(profile.stddev[l]) +
           ',' + std::to_string(profile.samples) + ',' + profile.tag + '\n';
  io::write_atomic(path, out);
}

EntropyProfile read_profile_csv(const std::filesystem::path& path) {
  auto lines = io::read_lines(path);
  if (lines.empty() || lines[0] != "layer,mean_entropy_nats,std,n_samples,model_tag")
    throw FormatError(path.string() + ": missing profile header");
  EntropyProfile p;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto where = path.string() + ":" + std::to_string(i + 1);
    auto f = io::split(lines[i], ',');
    if (f.size() != 5) throw FormatError(where + ": expected 5 columns");
    try {
      if (std::stoul(f[0]) != p.mean.size()) throw FormatError(where + ": layers out of order");
      p.mean.push_back(std::stod(f[1]));
      p.stddev.push_back(std::stod(f[2]));
      p.samples = std::stoul(f[3]);
    } catch (const FormatError&) {
      throw;
    } catch (const std::exception&) {
      throw FormatError(where + ": bad number");
    }
    p.tag = f[4];
  }
  return p;
}

void write_comparison_csv(const std::filesystem::path& path, const ProfileComparison& comparison) {
  std::string out = "layer,entropy_a,entropy_b,delta,relative_delta,tag_a,tag_b\n";
  for (const auto& d : comparison.layers)
    out += std::to_string(d.layer) + ',' + csv_double(d.a) + ',' + csv_double(d.b) + ',' +
           csv_double(d.delta) + ',' + csv_double(d.relative) + ',' + comparison.tag_a + ',' +
           comparison.tag_b + '\n';
  io::write_atomic(path, out);
}

}  // namespace condenser
