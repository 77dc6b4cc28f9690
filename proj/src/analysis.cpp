#include "scitrace/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include "scitrace/error.hpp"
#include "scitrace/util.hpp"

namespace scitrace::analysis {

using store::Cell;
using store::ResultTable;

namespace {

std::size_t require_column(const ResultTable& t, std::string_view name) {
  auto idx = t.column_index(name);
  if (!idx) throw Error(Errc::schema, "result table has no column '" + std::string(name) + "'");
  return *idx;
}

std::optional<std::int64_t> int_cell(const Cell& c) {
  if (const auto* i = std::get_if<std::int64_t>(&c)) return *i;
  if (const auto* d = std::get_if<double>(&c)) return static_cast<std::int64_t>(*d);
  return std::nullopt;
}

std::optional<double> num_cell(const Cell& c) {
  if (const auto* d = std::get_if<double>(&c)) return *d;
  if (const auto* i = std::get_if<std::int64_t>(&c)) return static_cast<double>(*i);
  return std::nullopt;
}

std::string str_cell(const Cell& c) {
  if (const auto* s = std::get_if<std::string>(&c)) return *s;
  return {};
}

void check_width(Nanos w) {
  if (w <= Nanos::zero()) throw Error(Errc::invalid_argument, "bucket width must be positive");
}

void check_range(UnixNanos start, UnixNanos end) {
  if (start >= end) throw Error(Errc::invalid_range, "start must be before end");
}

std::size_t bucket_count(UnixNanos start, UnixNanos end, Nanos w) {
  const auto width = static_cast<UnixNanos>(w.count());
  return static_cast<std::size_t>((end - start + width - 1) / width);
}

struct Sample {
  UnixNanos t;
  double v;
};

// Samples of one metric, grouped per job, in table (time) order.
std::map<JobIdentity, std::vector<Sample>> samples_by_job(const ResultTable& metrics, std::string_view metric,
                                                          std::string* unit) {
  std::map<JobIdentity, std::vector<Sample>> out;
  if (metrics.columns.empty()) return out;
  const auto c_t = require_column(metrics, "time_unix_nano");
  const auto c_name = require_column(metrics, "name");
  const auto c_val = require_column(metrics, "value");
  const auto c_unit = require_column(metrics, "unit");
  for (std::size_t i = 0; i < metrics.rows.size(); ++i) {
    const auto& row = metrics.rows[i];
    if (str_cell(row[c_name]) != metric) continue;
    auto job = row_job(metrics, i);
    auto t = int_cell(row[c_t]);
    auto v = num_cell(row[c_val]);
    if (!job || !t || !v) continue;
    if (unit && unit->empty()) *unit = str_cell(row[c_unit]);
    out[*job].push_back({static_cast<UnixNanos>(*t), *v});
  }
  for (auto& [_, samples] : out) {
    std::stable_sort(samples.begin(), samples.end(), [](const Sample& a, const Sample& b) { return a.t < b.t; });
  }
  return out;
}

struct JobSpan {
  JobIdentity job;
  std::string key;  // trace_id:span_id
  UnixNanos start = 0;
  std::optional<UnixNanos> end;
};

// Job spans, one per span id; a closed record supersedes an open one.
std::vector<JobSpan> job_spans(const ResultTable& spans) {
  std::map<std::string, JobSpan> by_key;
  if (spans.columns.empty()) return {};
  const auto c_t = require_column(spans, "time_unix_nano");
  const auto c_end = require_column(spans, "end_time_unix_nano");
  const auto c_kind = require_column(spans, "kind");
  const auto c_trace = require_column(spans, "trace_id");
  const auto c_span = require_column(spans, "span_id");
  for (std::size_t i = 0; i < spans.rows.size(); ++i) {
    const auto& row = spans.rows[i];
    if (str_cell(row[c_kind]) != "job") continue;
    auto job = row_job(spans, i);
    auto t = int_cell(row[c_t]);
    if (!job || !t) continue;
    JobSpan js{*job, str_cell(row[c_trace]) + ":" + str_cell(row[c_span]), static_cast<UnixNanos>(*t), std::nullopt};
    if (auto e = int_cell(row[c_end])) js.end = static_cast<UnixNanos>(*e);
    auto [it, inserted] = by_key.emplace(js.key, js);
    if (!inserted && !it->second.end && js.end) it->second = js;
  }
  std::vector<JobSpan> out;
  out.reserve(by_key.size());
  for (auto& [_, js] : by_key) out.push_back(std::move(js));
  std::sort(out.begin(), out.end(), [](const JobSpan& a, const JobSpan& b) {
    return std::tie(a.start, a.key) < std::tie(b.start, b.key);
  });
  return out;
}

}  // namespace

std::size_t Distribution::total() const {
  std::size_t n = 0;
  for (auto c : counts) n += c;
  return n;
}

ResultTable TimeSeries::to_table() const {
  ResultTable t;
  t.columns = {{"bucket_start", store::ColumnType::int_}, {"value", store::ColumnType::float_}};
  for (std::size_t i = 0; i < value.size(); ++i) {
    t.rows.push_back({static_cast<std::int64_t>(bucket_start[i]), value[i]});
  }
  return t;
}

ResultTable Distribution::to_table() const {
  ResultTable t;
  t.columns = {{"bin_start", store::ColumnType::float_},
               {"bin_end", store::ColumnType::float_},
               {"count", store::ColumnType::int_}};
  for (std::size_t i = 0; i < counts.size(); ++i) {
    t.rows.push_back({bin_edges[i], bin_edges[i + 1], static_cast<std::int64_t>(counts[i])});
  }
  return t;
}

Distribution histogram(const std::vector<double>& values, std::size_t bins) {
  if (bins == 0) throw Error(Errc::invalid_argument, "bin count must be at least 1");
  Distribution d;
  if (values.empty()) return d;
  auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  d.min = *lo;
  d.max = *hi;
  double sum = 0;
  for (double v : values) sum += v;
  d.mean = sum / static_cast<double>(values.size());
  if (d.min == d.max) {
    d.bin_edges = {d.min - 0.5, d.min + 0.5};
    d.counts = {values.size()};
    return d;
  }
  d.bin_edges.resize(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) {
    d.bin_edges[i] = d.min + (d.max - d.min) * static_cast<double>(i) / static_cast<double>(bins);
  }
  d.bin_edges[bins] = d.max;
  d.counts.assign(bins, 0);
  for (double v : values) {
    auto it = std::upper_bound(d.bin_edges.begin(), d.bin_edges.end(), v);
    auto idx = static_cast<std::size_t>(it - d.bin_edges.begin());
    idx = idx == 0 ? 0 : std::min(idx - 1, bins - 1);
    ++d.counts[idx];
  }
  return d;
}

std::optional<JobIdentity> row_job(const ResultTable& table, std::size_t row) {
  const auto& r = table.rows.at(row);
  auto id = int_cell(r[require_column(table, "job.id")]);
  auto uid = int_cell(r[require_column(table, "job.uid")]);
  if (!id || !uid) return std::nullopt;
  JobIdentity job;
  job.job_id = static_cast<std::uint64_t>(*id);
  job.uid = static_cast<std::uint64_t>(*uid);
  job.hostname = str_cell(r[require_column(table, "host.name")]);
  if (auto task = int_cell(r[require_column(table, "job.array_task_id")])) {
    job.array_task_id = static_cast<std::uint64_t>(*task);
  }
  return job;
}

TimeSeries total_usage_over_time(const ResultTable& metrics, std::string_view metric, UnixNanos start,
                                 UnixNanos end, Nanos bucket_width, Nanos horizon) {
  check_width(bucket_width);
  check_range(start, end);
  TimeSeries ts;
  ts.metric = metric;
  ts.bucket_width = bucket_width;
  auto jobs = samples_by_job(metrics, metric, &ts.unit);
  if (jobs.empty()) return ts;
  const auto n = bucket_count(start, end, bucket_width);
  const auto width = static_cast<UnixNanos>(bucket_width.count());
  const auto hz = static_cast<UnixNanos>(horizon.count());
  ts.bucket_start.resize(n);
  ts.value.assign(n, 0.0);
  std::vector<std::size_t> cursor(jobs.size(), 0);
  for (std::size_t b = 0; b < n; ++b) {
    const UnixNanos bstart = start + b * width;
    const UnixNanos bend = bstart + width;
    ts.bucket_start[b] = bstart;
    double sum = 0;
    std::size_t j = 0;
    for (const auto& [_, samples] : jobs) {
      auto& c = cursor[j++];
      while (c < samples.size() && samples[c].t <= bend) ++c;
      if (c == 0) continue;
      const Sample& last = samples[c - 1];
      if (bend - last.t <= hz) sum += last.v;
    }
    ts.value[b] = sum;
  }
  return ts;
}

Distribution max_per_job_distribution(const ResultTable& metrics, std::string_view metric, std::size_t bins) {
  std::string unit;
  auto jobs = samples_by_job(metrics, metric, &unit);
  std::vector<double> maxima;
  maxima.reserve(jobs.size());
  for (const auto& [_, samples] : jobs) {
    double m = samples.front().v;
    for (const auto& s : samples) m = std::max(m, s.v);
    maxima.push_back(m);
  }
  Distribution d = histogram(maxima, bins);
  d.metric = metric;
  d.unit = unit;
  return d;
}

Distribution job_durations(const ResultTable& spans, std::size_t bins) {
  std::vector<double> durations;
  std::size_t open = 0;
  for (const auto& js : job_spans(spans)) {
    if (!js.end) {
      ++open;
      continue;
    }
    durations.push_back(static_cast<double>(*js.end - js.start) / 1e9);
  }
  Distribution d = histogram(durations, bins);
  d.metric = "job.duration";
  d.unit = "s";
  d.open_count = open;
  return d;
}

TimeSeries active_jobs_timeline(const ResultTable& spans, UnixNanos start, UnixNanos end, Nanos bucket_width) {
  check_width(bucket_width);
  check_range(start, end);
  TimeSeries ts;
  ts.metric = "active_jobs";
  ts.unit = "1";
  ts.bucket_width = bucket_width;
  auto list = job_spans(spans);
  if (list.empty()) return ts;
  const auto n = bucket_count(start, end, bucket_width);
  const auto width = static_cast<UnixNanos>(bucket_width.count());
  ts.bucket_start.resize(n);
  ts.value.assign(n, 0.0);
  for (std::size_t b = 0; b < n; ++b) {
    const UnixNanos bstart = start + b * width;
    const UnixNanos bend = bstart + width;
    ts.bucket_start[b] = bstart;
    std::size_t count = 0;
    for (const auto& js : list) {
      const UnixNanos e = js.end.value_or(std::max(end, bend));
      if (js.start < bend && e > bstart) ++count;
    }
    ts.value[b] = static_cast<double>(count);
  }
  return ts;
}

Grid per_job_grid(const ResultTable& metrics, const ResultTable& spans, std::string_view metric,
                  const JobSelector& selector) {
  Grid grid;
  grid.metric = metric;
  auto samples = samples_by_job(metrics, metric, &grid.unit);

  std::map<JobIdentity, std::optional<UnixNanos>> durations;
  for (const auto& js : job_spans(spans)) {
    auto& d = durations[js.job];
    if (js.end) d = *js.end - js.start;
  }

  std::vector<JobIdentity> chosen;
  if (selector.mode == JobSelector::Mode::shortest_k) {
    if (selector.k == 0) throw Error(Errc::invalid_argument, "k must be at least 1");
    std::vector<std::pair<UnixNanos, JobIdentity>> closed;
    for (const auto& [job, d] : durations) {
      if (d) closed.emplace_back(*d, job);
    }
    std::sort(closed.begin(), closed.end(), [](const auto& a, const auto& b) {
      return std::tie(a.first, a.second.job_id, a.second) < std::tie(b.first, b.second.job_id, b.second);
    });
    for (std::size_t i = 0; i < closed.size() && i < selector.k; ++i) chosen.push_back(closed[i].second);
  } else {
    std::vector<std::string> unknown;
    std::set<JobIdentity> known;
    for (const auto& [job, _] : durations) known.insert(job);
    for (const auto& [job, _] : samples) known.insert(job);
    for (auto id : selector.ids) {
      bool found = false;
      for (const auto& job : known) {
        if (job.job_id == id) {
          chosen.push_back(job);
          found = true;
        }
      }
      if (!found) unknown.push_back(std::to_string(id));
    }
    if (!unknown.empty()) {
      std::string list;
      for (const auto& u : unknown) list += (list.empty() ? "" : ", ") + u;
      throw Error(Errc::not_found, "unknown job ids: " + list);
    }
  }

  std::set<JobIdentity> chosen_set(chosen.begin(), chosen.end());
  for (const auto& job : chosen) {
    JobSeries js;
    js.job = job;
    auto d = durations.find(job);
    if (d != durations.end() && d->second) js.duration_s = static_cast<double>(*d->second) / 1e9;
    auto s = samples.find(job);
    if (s != samples.end()) {
      for (const auto& smp : s->second) {
        js.time.push_back(smp.t);
        js.value.push_back(smp.v);
      }
    }
    grid.series.push_back(std::move(js));
  }

  grid.rows.columns = metrics.columns;
  if (!metrics.columns.empty()) {
    const auto c_name = require_column(metrics, "name");
    for (std::size_t i = 0; i < metrics.rows.size(); ++i) {
      if (str_cell(metrics.rows[i][c_name]) != metric) continue;
      auto job = row_job(metrics, i);
      if (job && chosen_set.contains(*job)) grid.rows.rows.push_back(metrics.rows[i]);
    }
  }
  return grid;
}

std::string_view to_string(ChartKind k) {
  switch (k) {
    case ChartKind::line: return "line";
    case ChartKind::histogram: return "histogram";
    case ChartKind::grid: return "grid";
  }
  return "unknown";
}

ChartKind chart_kind_from_string(std::string_view s) {
  if (s == "line") return ChartKind::line;
  if (s == "histogram") return ChartKind::histogram;
  if (s == "grid") return ChartKind::grid;
  throw Error(Errc::invalid_argument, "unknown chart kind '" + std::string(s) + "'");
}

// SVG output

namespace {

constexpr double kPanelW = 480, kPanelH = 300;
constexpr double kMarginL = 70, kMarginR = 20, kMarginT = 30, kMarginB = 50;
constexpr int kGridColumns = 3;

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string label(std::string_view name, std::string_view unit) {
  return unit.empty() ? std::string(name) : std::string(name) + " (" + std::string(unit) + ")";
}

struct Frame {
  double ox, oy;  // panel origin
  double x0, x1, y0, y1;

  double px(double x) const {
    double w = kPanelW - kMarginL - kMarginR;
    return ox + kMarginL + (x1 == x0 ? w / 2 : (x - x0) / (x1 - x0) * w);
  }
  double py(double y) const {
    double h = kPanelH - kMarginT - kMarginB;
    return oy + kPanelH - kMarginB - (y1 == y0 ? h / 2 : (y - y0) / (y1 - y0) * h);
  }
};

void axes(std::string& out, const Frame& f, const std::string& title, const std::string& xlabel,
          const std::string& ylabel) {
  const double left = f.ox + kMarginL, right = f.ox + kPanelW - kMarginR;
  const double top = f.oy + kMarginT, bottom = f.oy + kPanelH - kMarginB;
  out += "<line x1=\"" + fmt("%.2f", left) + "\" y1=\"" + fmt("%.2f", bottom) + "\" x2=\"" + fmt("%.2f", right) +
         "\" y2=\"" + fmt("%.2f", bottom) + "\" stroke=\"black\"/>\n";
  out += "<line x1=\"" + fmt("%.2f", left) + "\" y1=\"" + fmt("%.2f", top) + "\" x2=\"" + fmt("%.2f", left) +
         "\" y2=\"" + fmt("%.2f", bottom) + "\" stroke=\"black\"/>\n";
  out += "<text x=\"" + fmt("%.2f", f.ox + kPanelW / 2) + "\" y=\"" + fmt("%.2f", f.oy + 18) +
         "\" text-anchor=\"middle\" font-size=\"13\">" + escape(title) + "</text>\n";
  out += "<text class=\"xlabel\" x=\"" + fmt("%.2f", (left + right) / 2) + "\" y=\"" + fmt("%.2f", bottom + 38) +
         "\" text-anchor=\"middle\" font-size=\"11\">" + escape(xlabel) + "</text>\n";
  out += "<text class=\"ylabel\" x=\"" + fmt("%.2f", f.ox + 14) + "\" y=\"" + fmt("%.2f", (top + bottom) / 2) +
         "\" text-anchor=\"middle\" font-size=\"11\" transform=\"rotate(-90 " + fmt("%.2f", f.ox + 14) + " " +
         fmt("%.2f", (top + bottom) / 2) + ")\">" + escape(ylabel) + "</text>\n";
  auto tick = [&](double x, double y, const std::string& text, const char* anchor) {
    out += "<text x=\"" + fmt("%.2f", x) + "\" y=\"" + fmt("%.2f", y) + "\" text-anchor=\"" + anchor +
           "\" font-size=\"9\">" + escape(text) + "</text>\n";
  };
  tick(left, bottom + 14, fmt("%.4g", f.x0), "start");
  tick(right, bottom + 14, fmt("%.4g", f.x1), "end");
  tick(left - 4, bottom, fmt("%.4g", f.y0), "end");
  tick(left - 4, top + 8, fmt("%.4g", f.y1), "end");
}

void polyline(std::string& out, const Frame& f, const std::vector<double>& xs, const std::vector<double>& ys) {
  out += "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"";
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ' ';
    out += fmt("%.2f", f.px(xs[i])) + "," + fmt("%.2f", f.py(ys[i]));
  }
  out += "\"/>\n";
}

Frame frame_for(double ox, double oy, const std::vector<double>& xs, const std::vector<double>& ys) {
  Frame f{ox, oy, 0, 1, 0, 1};
  if (!xs.empty()) {
    auto [xl, xh] = std::minmax_element(xs.begin(), xs.end());
    f.x0 = *xl;
    f.x1 = *xh;
  }
  if (!ys.empty()) {
    f.y0 = std::min(0.0, *std::min_element(ys.begin(), ys.end()));
    f.y1 = std::max(0.0, *std::max_element(ys.begin(), ys.end()));
  }
  return f;
}

std::string header(double w, double h) {
  return "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
         fmt("%.0f", w) + "\" height=\"" + fmt("%.0f", h) + "\" viewBox=\"0 0 " + fmt("%.0f", w) + " " +
         fmt("%.0f", h) + "\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

std::string line_svg(const TimeSeries& ts) {
  if (ts.empty()) throw Error(Errc::invalid_argument, "cannot render an empty time series '" + ts.metric + "'");
  std::vector<double> xs;
  const UnixNanos t0 = ts.bucket_start.front();
  for (auto b : ts.bucket_start) xs.push_back(static_cast<double>(b - t0) / 1e9);
  std::string out = header(kPanelW, kPanelH);
  Frame f = frame_for(0, 0, xs, ts.value);
  out += "<g class=\"panel\">\n";
  axes(out, f, ts.metric, "time since " + std::to_string(t0) + " (s)", label(ts.metric, ts.unit));
  polyline(out, f, xs, ts.value);
  out += "</g>\n</svg>\n";
  return out;
}

std::string histogram_svg(const Distribution& d) {
  if (d.empty()) throw Error(Errc::invalid_argument, "cannot render an empty distribution '" + d.metric + "'");
  std::vector<double> ys;
  for (auto c : d.counts) ys.push_back(static_cast<double>(c));
  std::string out = header(kPanelW, kPanelH);
  Frame f = frame_for(0, 0, {d.bin_edges.front(), d.bin_edges.back()}, ys);
  out += "<g class=\"panel\">\n";
  axes(out, f, d.metric, label(d.metric, d.unit), "jobs");
  for (std::size_t i = 0; i < d.counts.size(); ++i) {
    double x = f.px(d.bin_edges[i]), x2 = f.px(d.bin_edges[i + 1]);
    double y = f.py(ys[i]), y0 = f.py(0);
    out += "<rect class=\"bar\" x=\"" + fmt("%.2f", x) + "\" y=\"" + fmt("%.2f", y) + "\" width=\"" +
           fmt("%.2f", std::max(0.0, x2 - x - 1)) + "\" height=\"" + fmt("%.2f", y0 - y) +
           "\" fill=\"steelblue\"/>\n";
  }
  out += "</g>\n</svg>\n";
  return out;
}

std::string grid_svg(const Grid& g) {
  if (g.series.empty()) throw Error(Errc::invalid_argument, "cannot render an empty grid '" + g.metric + "'");
  const int n = static_cast<int>(g.series.size());
  const int cols = std::min(n, kGridColumns);
  const int rows = (n + cols - 1) / cols;
  std::string out = header(kPanelW * cols, kPanelH * rows);
  for (int i = 0; i < n; ++i) {
    const auto& s = g.series[static_cast<std::size_t>(i)];
    std::vector<double> xs;
    const UnixNanos t0 = s.time.empty() ? 0 : s.time.front();
    for (auto t : s.time) xs.push_back(static_cast<double>(t - t0) / 1e9);
    Frame f = frame_for(kPanelW * (i % cols), kPanelH * (i / cols), xs, s.value);
    out += "<g class=\"panel\">\n";
    axes(out, f, "job " + to_string(s.job) + ", " + fmt("%.3g", s.duration_s) + " s", "time since job start (s)",
         label(g.metric, g.unit));
    if (!xs.empty()) polyline(out, f, xs, s.value);
    out += "</g>\n";
  }
  out += "</svg>\n";
  return out;
}

}  // namespace

std::string render_svg(const ChartData& data, ChartKind kind) {
  switch (kind) {
    case ChartKind::line:
      if (const auto* ts = std::get_if<TimeSeries>(&data)) return line_svg(*ts);
      break;
    case ChartKind::histogram:
      if (const auto* d = std::get_if<Distribution>(&data)) return histogram_svg(*d);
      break;
    case ChartKind::grid:
      if (const auto* g = std::get_if<Grid>(&data)) return grid_svg(*g);
      break;
  }
  throw Error(Errc::invalid_argument, "chart kind '" + std::string(to_string(kind)) + "' does not fit the data");
}

void render_chart(const ChartData& data, ChartKind kind, const std::filesystem::path& out) {
  write_file(out, render_svg(data, kind));
}

}  // namespace scitrace::analysis
