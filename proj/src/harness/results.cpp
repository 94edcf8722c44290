#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "multirep/harness.hpp"

namespace multirep {

using nlohmann::ordered_json;

std::string trial_to_json(const TrialResult& r) {
  ordered_json j;
  j["pipeline"] = pipeline_name(r.pipeline);
  j["arm"] = arm_name(r.arm);
  j["train_attack"] = attack_name(r.train_attack);
  j["test_attack"] = attack_name(r.test_attack);
  j["N"] = r.n;
  j["trial"] = r.trial;
  j["accuracy"] = r.accuracy;
  return j.dump();
}

TrialResult trial_from_json(const std::string& line) {
  try {
    const auto j = ordered_json::parse(line);
    TrialResult r;
    r.pipeline = parse_pipeline(j.at("pipeline").get<std::string>());
    r.arm = parse_arm(j.at("arm").get<std::string>());
    r.train_attack = parse_attack(j.at("train_attack").get<std::string>());
    r.test_attack = parse_attack(j.at("test_attack").get<std::string>());
    r.n = j.at("N").get<std::size_t>();
    r.trial = j.at("trial").get<std::size_t>();
    r.accuracy = j.at("accuracy").get<double>();
    if (!(r.accuracy >= 0.0 && r.accuracy <= 1.0)) throw DataError("accuracy outside [0, 1]");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed result line: ") + e.what());
  }
}

std::vector<TrialResult> read_results(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw DataError("missing results file " + file.string());
  std::vector<TrialResult> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(trial_from_json(line));
  }
  return out;
}

Summary summarize(const std::vector<TrialResult>& results) {
  std::map<CellKey, std::vector<double>> groups;
  for (const auto& r : results) groups[{r.pipeline, r.arm, r.train_attack, r.test_attack, r.n}].push_back(r.accuracy);
  Summary out;
  std::size_t expected = 0;
  for (const auto& [key, acc] : groups) {
    if (expected == 0) expected = acc.size();
    if (acc.size() != expected) {
      throw std::invalid_argument("cells have mismatched trial counts (" + std::to_string(expected) + " vs " +
                                  std::to_string(acc.size()) + ")");
    }
    SummaryCell cell;
    cell.trials = acc.size();
    double sum = 0.0;
    for (double a : acc) sum += a;
    cell.mean = sum / static_cast<double>(acc.size());
    if (acc.size() < 2) {
      cell.std_undefined = true;
    } else {
      double ss = 0.0;
      for (double a : acc) ss += (a - cell.mean) * (a - cell.mean);
      cell.std = std::sqrt(ss / static_cast<double>(acc.size() - 1));
    }
    out[key] = cell;
  }
  return out;
}

namespace {

std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void write_text(const std::filesystem::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << text;
  if (!out) throw std::runtime_error("failed writing " + file.string());
}

}  // namespace

void write_summary_csv(const Summary& summary, const std::filesystem::path& file) {
  std::string text = "pipeline,arm,train_attack,test_attack,N,mean,std,trials\n";
  for (const auto& [k, c] : summary) {
    text += pipeline_name(k.pipeline) + "," + arm_name(k.arm) + "," + attack_name(k.train_attack) + "," +
            attack_name(k.test_attack) + "," + std::to_string(k.n) + "," + fixed(c.mean) + "," + fixed(c.std) + "," +
            std::to_string(c.trials) + "\n";
  }
  write_text(file, text);
}

namespace {

struct Series {
  std::vector<std::size_t> n;
  std::vector<double> mean, std;
};

std::string svg_chart(const std::string& title, const std::map<Arm, Series>& series) {
  constexpr double W = 520, H = 340, left = 64, right = 130, top = 40, bottom = 50;
  const double pw = W - left - right, ph = H - top - bottom;

  std::set<std::size_t> ns;
  double lo = 1.0, hi = 0.0;
  for (const auto& [arm, s] : series) {
    for (std::size_t i = 0; i < s.n.size(); ++i) {
      ns.insert(s.n[i]);
      lo = std::min(lo, s.mean[i] - s.std[i]);
      hi = std::max(hi, s.mean[i] + s.std[i]);
    }
  }
  if (lo > hi) {
    lo = 0.0;
    hi = 1.0;
  }
  const double pad = std::max(0.01, (hi - lo) * 0.1);
  lo = std::max(0.0, lo - pad);
  hi = std::min(1.0, hi + pad);
  if (hi - lo < 1e-9) hi = lo + 0.01;

  const double xmin = std::log2(static_cast<double>(*ns.begin()));
  const double xmax = std::log2(static_cast<double>(*ns.rbegin()));
  auto px = [&](std::size_t n) {
    if (xmax - xmin < 1e-12) return left + pw / 2;
    return left + pw * (std::log2(static_cast<double>(n)) - xmin) / (xmax - xmin);
  };
  auto py = [&](double v) { return top + ph * (1.0 - (v - lo) / (hi - lo)); };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
    << " " << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect x=\"0\" y=\"0\" width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
  o << "<text x=\"" << left + pw / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  o << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph
    << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph
    << "\" stroke=\"black\"/>\n";
  for (std::size_t n : ns) {
    o << "<line x1=\"" << fixed(px(n), 2) << "\" y1=\"" << top + ph << "\" x2=\"" << fixed(px(n), 2) << "\" y2=\""
      << top + ph + 5 << "\" stroke=\"black\"/>\n";
    o << "<text x=\"" << fixed(px(n), 2) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">" << n
      << "</text>\n";
  }
  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * t / 4.0;
    o << "<line x1=\"" << left - 5 << "\" y1=\"" << fixed(py(v), 2) << "\" x2=\"" << left << "\" y2=\""
      << fixed(py(v), 2) << "\" stroke=\"black\"/>\n";
    o << "<text x=\"" << left - 8 << "\" y=\"" << fixed(py(v) + 4, 2) << "\" text-anchor=\"end\">" << fixed(v, 3)
      << "</text>\n";
  }
  o << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">N</text>\n";
  o << "<text x=\"16\" y=\"" << top + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << top + ph / 2
    << ")\">detection accuracy</text>\n";

  int legend_row = 0;
  for (const auto& [arm, s] : series) {
    const char* colour = arm == Arm::treatment ? "#c0392b" : "#2c6fbb";
    std::string band, line;
    for (std::size_t i = 0; i < s.n.size(); ++i) band += fixed(px(s.n[i]), 2) + "," + fixed(py(s.mean[i] + s.std[i]), 2) + " ";
    for (std::size_t i = s.n.size(); i-- > 0;) band += fixed(px(s.n[i]), 2) + "," + fixed(py(s.mean[i] - s.std[i]), 2) + " ";
    for (std::size_t i = 0; i < s.n.size(); ++i) line += fixed(px(s.n[i]), 2) + "," + fixed(py(s.mean[i]), 2) + " ";
    band.pop_back();
    line.pop_back();
    o << "<polygon class=\"band " << arm_name(arm) << "\" points=\"" << band << "\" fill=\"" << colour
      << "\" fill-opacity=\"0.2\" stroke=\"none\"/>\n";
    o << "<polyline class=\"mean " << arm_name(arm) << "\" points=\"" << line << "\" fill=\"none\" stroke=\"" << colour
      << "\" stroke-width=\"2\"/>\n";
    for (std::size_t i = 0; i < s.n.size(); ++i) {
      o << "<circle cx=\"" << fixed(px(s.n[i]), 2) << "\" cy=\"" << fixed(py(s.mean[i]), 2) << "\" r=\"3\" fill=\""
        << colour << "\"/>\n";
    }
    const double ly = top + 10 + 20 * legend_row++;
    o << "<line x1=\"" << left + pw + 15 << "\" y1=\"" << ly << "\" x2=\"" << left + pw + 35 << "\" y2=\"" << ly
      << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << left + pw + 40 << "\" y=\"" << ly + 4 << "\">" << arm_name(arm) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace

std::vector<std::filesystem::path> write_summary_svgs(const Summary& summary, const std::filesystem::path& dir) {
  std::map<std::tuple<Pipeline, AttackKind, AttackKind>, std::map<Arm, Series>> charts;
  for (const auto& [k, c] : summary) {
    Series& s = charts[{k.pipeline, k.train_attack, k.test_attack}][k.arm];
    s.n.push_back(k.n);
    s.mean.push_back(c.mean);
    s.std.push_back(c.std);
  }
  std::vector<std::filesystem::path> written;
  for (const auto& [key, series] : charts) {
    const auto& [pipeline, train, test] = key;
    const std::string title = pipeline_name(pipeline) + ": trained on " + attack_name(train) + ", tested on " +
                              attack_name(test);
    const auto file = dir / (pipeline_name(pipeline) + "_" + attack_name(train) + "_" + attack_name(test) + ".svg");
    write_text(file, svg_chart(title, series));
    written.push_back(file);
  }
  return written;
}

}  // namespace multirep
