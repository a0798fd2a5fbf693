#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "bld/pipeline.hpp"

namespace bld {

namespace {

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::string k_label(std::size_t k) { return k == kUnboundedBeam ? "inf" : std::to_string(k); }

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

/// Renders rows with columns padded to their widest cell; numbers right-aligned.
std::string aligned_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  for (const auto& r : rows)
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
  auto line = [&](const std::vector<std::string>& r) {
    std::string out;
    for (std::size_t c = 0; c < r.size(); ++c) {
      if (c) out += "  ";
      out += std::string(width[c] - r[c].size(), ' ') + r[c];
    }
    return out + "\n";
  };
  std::string out = line(header);
  std::size_t total = 0;
  for (std::size_t w : width) total += w;
  out += std::string(total + 2 * (width.size() - 1), '-') + "\n";
  for (const auto& r : rows) out += line(r);
  return out;
}

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorKind::Io, "cannot create " + dir.string() + ": " + ec.message());
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f"};

}  // namespace

std::string svg_line_plot(const std::string& title, const std::string& x_label, const std::string& y_label,
                          std::span<const PlotSeries> series, bool log_x, bool log_y) {
  const double width = 640, height = 400, left = 70, right = 170, top = 40, bottom = 50;
  auto tx = [&](double x) { return log_x ? std::log10(x) : x; };
  auto ty = [&](double y) { return log_y ? std::log10(y) : y; };
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series)
    for (auto [x, y] : s.points) {
      if ((log_x && !(x > 0)) || (log_y && !(y > 0)) || !std::isfinite(x) || !std::isfinite(y)) continue;
      x0 = std::min(x0, tx(x));
      x1 = std::max(x1, tx(x));
      y0 = std::min(y0, ty(y));
      y1 = std::max(y1, ty(y));
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x0 -= 0.5, x1 += 0.5;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  const double pw = width - left - right, ph = height - top - bottom;
  auto px = [&](double x) { return left + (tx(x) - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return top + ph - (ty(y) - y0) / (y1 - y0) * ph; };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(title)
     << "</text>\n";
  os << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    double fx = x0 + (x1 - x0) * i / 4.0, fy = y0 + (y1 - y0) * i / 4.0;
    double vx = log_x ? std::pow(10.0, fx) : fx, vy = log_y ? std::pow(10.0, fy) : fy;
    double sx = left + pw * i / 4.0, sy = top + ph - ph * i / 4.0;
    os << "<text class=\"xtick\" x=\"" << sx << "\" y=\"" << top + ph + 16 << "\" text-anchor=\"middle\">"
       << fmt("%.3g", vx) << "</text>\n";
    os << "<text class=\"ytick\" x=\"" << left - 6 << "\" y=\"" << sy + 4 << "\" text-anchor=\"end\">"
       << fmt("%.3g", vy) << "</text>\n";
  }
  os << "<text x=\"" << left + pw / 2 << "\" y=\"" << height - 10 << "\" text-anchor=\"middle\">" << xml_escape(x_label)
     << "</text>\n";
  os << "<text transform=\"translate(16," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
     << xml_escape(y_label) << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = kPalette[i % std::size(kPalette)];
    os << "<g class=\"series\" data-label=\"" << xml_escape(series[i].label) << "\">\n<polyline fill=\"none\" stroke=\""
       << color << "\" stroke-width=\"2\" points=\"";
    for (auto [x, y] : series[i].points) {
      if ((log_x && !(x > 0)) || (log_y && !(y > 0)) || !std::isfinite(x) || !std::isfinite(y)) continue;
      os << fmt("%.2f", px(x)) << "," << fmt("%.2f", py(y)) << " ";
    }
    os << "\"/>\n";
    for (auto [x, y] : series[i].points) {
      if ((log_x && !(x > 0)) || (log_y && !(y > 0)) || !std::isfinite(x) || !std::isfinite(y)) continue;
      os << "<circle cx=\"" << fmt("%.2f", px(x)) << "\" cy=\"" << fmt("%.2f", py(y)) << "\" r=\"3\" fill=\"" << color
         << "\"/>\n";
    }
    double ly = top + 10 + 18.0 * static_cast<double>(i);
    os << "<line x1=\"" << width - right + 12 << "\" y1=\"" << ly << "\" x2=\"" << width - right + 32 << "\" y2=\"" << ly
       << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << width - right + 38 << "\" y=\"" << ly + 4 << "\">" << xml_escape(series[i].label)
       << "</text>\n</g>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string sweep_table(const SweepReport& sweep) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : sweep.rows)
    rows.push_back({k_label(r.k), fmt("%g", r.epsilon), fmt("%.6g", r.median_jsd), fmt("%.6g", r.mean_jsd),
                    fmt("%.6g", r.seconds_per_sample), fmt("%.1f", r.queries_per_sample),
                    fmt("%.3g", r.mean_leaked_mass), std::to_string(r.failed_samples)});
  return aligned_table({"K", "epsilon", "median_jsd", "mean_jsd", "sec/sample", "queries", "leaked", "failed"}, rows);
}

ReportFiles emit_report(const SweepReport& sweep, const std::filesystem::path& out_dir) {
  if (sweep.rows.empty()) fail(ErrorKind::EmptyInput, "sweep report has no rows");
  ensure_dir(out_dir);
  ReportFiles files;
  files.table = out_dir / "sweep_table.txt";
  write_file_atomic(files.table, sweep_table(sweep));

  std::set<double> eps;
  std::set<std::size_t> ks;
  for (const auto& r : sweep.rows) {
    eps.insert(r.epsilon);
    ks.insert(r.k);
  }
  bool all_positive = true;
  for (const auto& r : sweep.rows) all_positive = all_positive && r.median_jsd > 0.0;
  std::vector<PlotSeries> by_eps;
  for (double e : eps) {
    PlotSeries s{"eps=" + fmt("%g", e), {}};
    for (const auto& r : sweep.rows)
      if (r.epsilon == e && r.k != kUnboundedBeam) s.points.emplace_back(static_cast<double>(r.k), r.median_jsd);
    std::sort(s.points.begin(), s.points.end());
    by_eps.push_back(std::move(s));
  }
  std::vector<PlotSeries> by_k;
  for (std::size_t k : ks) {
    PlotSeries s{"K=" + k_label(k), {}};
    for (const auto& r : sweep.rows)
      if (r.k == k) s.points.emplace_back(r.epsilon, r.seconds_per_sample);
    std::sort(s.points.begin(), s.points.end());
    by_k.push_back(std::move(s));
  }
  bool eps_positive = true;
  for (double e : eps) eps_positive = eps_positive && e > 0.0;
  files.plots.push_back(out_dir / "jsd_vs_k.svg");
  write_file_atomic(files.plots.back(),
                    svg_line_plot("Median JSD vs beam width", "K", "median JSD (nats)", by_eps, true, all_positive));
  files.plots.push_back(out_dir / "seconds_vs_epsilon.svg");
  write_file_atomic(files.plots.back(), svg_line_plot("Runtime vs pruning threshold", "epsilon", "seconds per sample",
                                                      by_k, eps_positive, false));
  return files;
}

ReportFiles emit_report(std::span<const MetricRecord> trace, const std::filesystem::path& out_dir) {
  if (trace.empty()) fail(ErrorKind::EmptyInput, "metrics trace is empty");
  ensure_dir(out_dir);
  ReportFiles files;
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : trace)
    rows.push_back({std::to_string(r.step), fmt("%.6f", r.token_ce), fmt("%.6f", r.byte_ce), fmt("%.6f", r.byte_kl),
                    fmt("%.6f", r.total), fmt("%.3g", r.lr)});
  files.table = out_dir / "train_table.txt";
  write_file_atomic(files.table, aligned_table({"step", "token_ce", "byte_ce", "byte_kl", "total", "lr"}, rows));
  std::vector<PlotSeries> series{{"token_ce", {}}, {"byte_ce", {}}, {"byte_kl", {}}, {"total", {}}};
  for (const auto& r : trace) {
    double x = static_cast<double>(r.step);
    series[0].points.emplace_back(x, r.token_ce);
    series[1].points.emplace_back(x, r.byte_ce);
    series[2].points.emplace_back(x, r.byte_kl);
    series[3].points.emplace_back(x, r.total);
  }
  files.plots.push_back(out_dir / "train_loss.svg");
  write_file_atomic(files.plots.back(), svg_line_plot("Training loss", "step", "loss", series));
  return files;
}

ReportFiles emit_report(std::span<const SftEpochRecord> records, const std::filesystem::path& out_dir) {
  if (records.empty()) fail(ErrorKind::EmptyInput, "byte-only SFT record list is empty");
  ensure_dir(out_dir);
  ReportFiles files;
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : records)
    rows.push_back({std::to_string(r.epoch), fmt("%.6f", r.train_byte_ce), fmt("%.6f", r.val_byte_ce),
                    fmt("%.6f", r.train_token_ce), fmt("%.6f", r.val_token_ce)});
  files.table = out_dir / "byte_sft_table.txt";
  write_file_atomic(files.table,
                    aligned_table({"epoch", "train_byte_ce", "val_byte_ce", "train_token_ce", "val_token_ce"}, rows));
  std::vector<PlotSeries> series{{"train byte CE", {}}, {"val byte CE", {}}, {"train token CE", {}}, {"val token CE", {}}};
  for (const auto& r : records) {
    double x = static_cast<double>(r.epoch);
    series[0].points.emplace_back(x, r.train_byte_ce);
    series[1].points.emplace_back(x, r.val_byte_ce);
    series[2].points.emplace_back(x, r.train_token_ce);
    series[3].points.emplace_back(x, r.val_token_ce);
  }
  files.plots.push_back(out_dir / "byte_sft_curves.svg");
  write_file_atomic(files.plots.back(), svg_line_plot("Byte-only SFT", "epoch", "cross-entropy (nats)", series));
  return files;
}

}  // namespace bld
