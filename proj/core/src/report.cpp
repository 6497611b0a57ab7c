#include "gradleak/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "gradleak/container.hpp"
#include "gradleak/metrics.hpp"

namespace gradleak {

namespace {

std::size_t position_of(const ClientRoundRecord& rec, int label) {
  for (std::size_t i = 0; i < rec.labels.size(); ++i)
    if (rec.labels[i] == label) return i;
  throw std::invalid_argument("ground truth has no sample with label " + std::to_string(label));
}

Tensor row(const Tensor& t, std::size_t i) { return slice_rows(t, i); }

}  // namespace

AnchorMetrics score_anchor(const AnchorAttack& attack, std::span<const ClientRoundRecord> records) {
  if (records.size() != attack.batches.size()) {
    throw std::invalid_argument("score_anchor: " + std::to_string(records.size()) +
                                " records for " + std::to_string(attack.batches.size()) +
                                " batches");
  }
  AnchorMetrics m;
  m.anchor = attack.anchor;
  m.label = attack.anchor_label;
  std::optional<std::size_t> baseline_best;
  for (std::size_t b = 0; b < attack.batches.size(); ++b) {
    const auto& ba = attack.batches[b];
    const auto& rec = records[b];
    const std::size_t pos = position_of(rec, m.label);
    BatchScore s;
    s.label_set_exact =
        std::multiset<int>(ba.recovery.labels.begin(), ba.recovery.labels.end()) ==
        std::multiset<int>(rec.labels.begin(), rec.labels.end());
    s.duplicate_warning = ba.recovery.duplicate_suspected;
    if (const auto* f = ba.feature_for(m.label)) {
      s.anchor_recovered = true;
      const Tensor truth = row(rec.features, pos);
      s.feature_cosine = cosine_similarity(f->feature.data, truth.data);
    }
    if (const auto* inv = ba.inversion_for(m.label)) s.objective = inv->objective;
    if (ba.baseline) {
      s.baseline_objective = ba.baseline->objective;
      if (!baseline_best || *s.baseline_objective < *m.batches[*baseline_best].baseline_objective) {
        baseline_best = b;
      }
    }
    if (s.feature_cosine && (!m.best_cosine_oracle || *s.feature_cosine > *m.best_cosine_oracle)) {
      m.best_cosine_oracle = s.feature_cosine;
      m.oracle_batch = b;
    }
    m.batches.push_back(s);
  }

  // Ground-truth images from the first batch; the anchor is identical in all.
  {
    const auto& rec = records.front();
    const std::size_t pos = position_of(rec, m.label);
    m.target_image = row(rec.inputs_used(), pos);
    m.clean_image = row(rec.clean_images, pos);
  }
  if (attack.best_by_objective) {
    const std::size_t b = *attack.best_by_objective;
    const auto& rec = records[b];
    const std::size_t pos = position_of(rec, m.label);
    const Tensor target = row(rec.inputs_used(), pos);
    const Tensor clean = row(rec.clean_images, pos);
    const Tensor& recon = attack.batches[b].inversion_for(m.label)->image;
    m.attacker_batch = b;
    m.attacker_cosine = m.batches[b].feature_cosine;
    m.objective = m.batches[b].objective;
    m.psnr_target = psnr(recon, target);
    m.psnr_clean = psnr(recon, clean);
    m.ssim_target = ssim(recon, target);
    m.ssim_clean = ssim(recon, clean);
    m.reconstruction = recon;
    m.target_image = target;
    m.clean_image = clean;
  }
  if (baseline_best) {
    const auto& ba = attack.batches[*baseline_best];
    const auto& rec = records[*baseline_best];
    const auto& labels = ba.recovery.labels;
    const auto it = std::find(labels.begin(), labels.end(), m.label);
    if (it != labels.end()) {
      const Tensor img = row(ba.baseline->images, static_cast<std::size_t>(it - labels.begin()));
      const std::size_t pos = position_of(rec, m.label);
      m.baseline_psnr_target = psnr(img, row(rec.inputs_used(), pos));
      m.baseline_psnr_clean = psnr(img, row(rec.clean_images, pos));
      m.baseline_image = img;
    }
  }
  return m;
}

namespace {

nlohmann::json stats(std::vector<double> v) {
  if (v.empty()) return nullptr;
  std::sort(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += x;
  const std::size_t n = v.size();
  const double median = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  return {{"mean", sum / static_cast<double>(n)}, {"median", median}, {"count", n}};
}

template <typename Get>
std::vector<double> collect(const ConfigResult& r, Get get) {
  std::vector<double> out;
  for (const auto& a : r.anchors)
    if (const std::optional<double> v = get(a)) out.push_back(*v);
  return out;
}

void dump_into(const nlohmann::json& j, std::string& out) {
  switch (j.type()) {
    case nlohmann::json::value_t::object: {
      std::vector<std::string> keys;
      for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
      std::sort(keys.begin(), keys.end());
      out += '{';
      for (std::size_t i = 0; i < keys.size(); ++i) {
        if (i) out += ',';
        out += nlohmann::json(keys[i]).dump();
        out += ':';
        dump_into(j.at(keys[i]), out);
      }
      out += '}';
      break;
    }
    case nlohmann::json::value_t::array:
      out += '[';
      for (std::size_t i = 0; i < j.size(); ++i) {
        if (i) out += ',';
        dump_into(j[i], out);
      }
      out += ']';
      break;
    case nlohmann::json::value_t::number_float: {
      const double v = j.get<double>();
      if (std::isnan(v)) {
        out += "\"nan\"";
      } else if (std::isinf(v)) {
        out += v > 0 ? "\"inf\"" : "\"-inf\"";
      } else {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.6f", v == 0.0 ? 0.0 : v);
        out += buf;
      }
      break;
    }
    default:
      out += j.dump();
  }
}

std::string file_stem(const std::string& name) {
  std::string s;
  for (char c : name) s.push_back(std::isalnum(static_cast<unsigned char>(c)) || c == '-' ? c : '_');
  return s;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

std::vector<double> sorted_curve(const ConfigResult& r) {
  auto v = collect(r, [](const AnchorMetrics& a) { return a.best_cosine_oracle; });
  std::sort(v.begin(), v.end(), std::greater<>());
  return v;
}

std::string render_svg(std::span<const ConfigResult> results) {
  constexpr double kW = 640, kH = 400, kL = 60, kR = 170, kT = 30, kB = 50;
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                  "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  double lo = 0.0;
  for (const auto& r : results)
    for (double v : sorted_curve(r)) lo = std::min(lo, v);
  const double pw = kW - kL - kR, ph = kH - kT - kB;
  auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };
  auto ymap = [&](double v) { return kT + (1.0 - v) / (1.0 - lo) * ph; };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
    << "\" viewBox=\"0 0 " << kW << ' ' << kH << "\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<rect x=\"" << kL << "\" y=\"" << kT << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"black\"/>\n"
    << "<text x=\"" << kL + pw / 2 << "\" y=\"" << kH - 12
    << "\" text-anchor=\"middle\" font-size=\"13\">anchors sorted by restoration quality</text>\n"
    << "<text x=\"16\" y=\"" << kT + ph / 2 << "\" text-anchor=\"middle\" font-size=\"13\" "
    << "transform=\"rotate(-90 16 " << kT + ph / 2 << ")\">cosine similarity</text>\n";
  for (double tick : {lo, (lo + 1.0) / 2.0, 1.0}) {
    s << "<text x=\"" << kL - 6 << "\" y=\"" << ymap(tick) + 4
      << "\" text-anchor=\"end\" font-size=\"11\">" << fmt(tick) << "</text>\n";
  }
  for (std::size_t c = 0; c < results.size(); ++c) {
    const auto curve = sorted_curve(results[c]);
    const char* color = kColors[c % std::size(kColors)];
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < curve.size(); ++i) {
      const double x = kL + (curve.size() > 1 ? pw * static_cast<double>(i) /
                                                    static_cast<double>(curve.size() - 1)
                                              : 0.0);
      s << (i ? " " : "") << fmt(x) << ',' << fmt(ymap(curve[i]));
    }
    s << "\"/>\n";
    if (curve.size() == 1) {
      s << "<circle cx=\"" << kL << "\" cy=\"" << fmt(ymap(curve[0])) << "\" r=\"3\" fill=\""
        << color << "\"/>\n";
    }
    const double ly = kT + 16.0 * static_cast<double>(c) + 10.0;
    s << "<line x1=\"" << kW - kR + 10 << "\" y1=\"" << ly << "\" x2=\"" << kW - kR + 30
      << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n"
      << "<text x=\"" << kW - kR + 36 << "\" y=\"" << ly + 4 << "\" font-size=\"12\">"
      << xml_escape(results[c].name) << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace

nlohmann::json summarize(const ConfigResult& r) {
  std::size_t batches = 0, exact = 0, duplicates = 0, unrecovered = 0;
  std::vector<double> all_cos;
  for (const auto& a : r.anchors) {
    if (!a.best_cosine_oracle) ++unrecovered;
    for (const auto& b : a.batches) {
      ++batches;
      exact += b.label_set_exact;
      duplicates += b.duplicate_warning;
      if (b.feature_cosine) all_cos.push_back(*b.feature_cosine);
    }
  }
  nlohmann::json j;
  j["anchors"] = r.anchors.size();
  j["batches"] = batches;
  j["label_recovery_rate"] = batches ? static_cast<double>(exact) / static_cast<double>(batches) : 0.0;
  j["duplicate_label_warnings"] = duplicates;
  j["anchors_without_recovered_label"] = unrecovered;
  j["cosine_all_batches"] = stats(all_cos);
  j["cosine_best_oracle"] = stats(collect(r, [](const AnchorMetrics& a) { return a.best_cosine_oracle; }));
  j["cosine_best_attacker"] = stats(collect(r, [](const AnchorMetrics& a) { return a.attacker_cosine; }));
  j["objective"] = stats(collect(r, [](const AnchorMetrics& a) { return a.objective; }));
  j["psnr_target"] = stats(collect(r, [](const AnchorMetrics& a) { return a.psnr_target; }));
  j["psnr_clean"] = stats(collect(r, [](const AnchorMetrics& a) { return a.psnr_clean; }));
  j["ssim_target"] = stats(collect(r, [](const AnchorMetrics& a) { return a.ssim_target; }));
  j["ssim_clean"] = stats(collect(r, [](const AnchorMetrics& a) { return a.ssim_clean; }));
  j["baseline_psnr_target"] =
      stats(collect(r, [](const AnchorMetrics& a) { return a.baseline_psnr_target; }));
  j["baseline_psnr_clean"] =
      stats(collect(r, [](const AnchorMetrics& a) { return a.baseline_psnr_clean; }));
  return j;
}

std::string dump_fixed(const nlohmann::json& j) {
  std::string out;
  dump_into(j, out);
  return out;
}

void emit_report(std::span<const ConfigResult> results, const std::filesystem::path& out_dir) {
  if (results.empty()) throw std::invalid_argument("emit_report: no results");
  std::filesystem::create_directories(out_dir / "anchors");

  nlohmann::json summary;
  summary["format"] = "gradleak-summary/1";
  summary["metric_note"] =
      "image quality is reported as PSNR and SSIM in place of LPIPS, which needs a pretrained "
      "perceptual network";
  summary["selection_note"] =
      "cosine_best_oracle picks the batch with the highest restoration cosine (evaluation only); "
      "image metrics use the attacker-side batch with the lowest inversion objective";
  for (const auto& r : results) summary["configs"][r.name] = summarize(r);
  write_text_atomic(out_dir / "summary.json", dump_fixed(summary) + "\n");

  std::string csv = "config,anchor_rank,cosine\n";
  for (const auto& r : results) {
    const auto curve = sorted_curve(r);
    for (std::size_t i = 0; i < curve.size(); ++i) {
      char buf[64];
      std::snprintf(buf, sizeof buf, ",%zu,%.6f\n", i, curve[i]);
      csv += r.name + buf;
    }
  }
  write_text_atomic(out_dir / "curves.csv", csv);
  write_text_atomic(out_dir / "curves.svg", render_svg(results));

  for (const auto& r : results) {
    for (const auto& a : r.anchors) {
      std::vector<Tensor> panels;
      if (a.reconstruction) panels.push_back(*a.reconstruction);
      panels.push_back(a.target_image);
      panels.push_back(a.clean_image);
      if (a.baseline_image) panels.push_back(*a.baseline_image);
      write_ppm(out_dir / "anchors" /
                    (file_stem(r.name) + "-anchor" + std::to_string(a.anchor) + ".ppm"),
                hstack_images(panels));
    }
  }
}

}  // namespace gradleak
