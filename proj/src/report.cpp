#include "circuitforge/report.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "circuitforge/error.hpp"

namespace circuitforge::report {

using nlohmann::json;

namespace {

constexpr double kWidth = 640.0;
constexpr double kHeight = 360.0;
constexpr double kMargin = 48.0;

std::string escape(const std::string& s) {
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

std::string fmt(double v, int precision = 4) {
    std::ostringstream os;
    os << std::setprecision(precision) << v;
    return os.str();
}

void open_svg(std::ostringstream& os, const std::string& title) {
    os << std::fixed << std::setprecision(2);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
       << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << kWidth / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
       << escape(title) << "</text>\n";
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
    out << text;
}

template <class T>
std::optional<T> optional_field(const json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<T>();
}

}  // namespace

Manifest manifest_from_json(const json& j, const std::filesystem::path& origin) {
    try {
        Manifest m;
        m.path = origin;
        m.raw = j;
        m.kind = j.at("kind").get<std::string>();
        const auto& inputs = j.at("inputs");
        m.task = inputs.at("task").get<std::string>();
        m.model_hash = inputs.at("model_hash").get<std::string>();
        m.flops = j.at("totals").at("flops").get<std::uint64_t>();
        m.seconds = j.at("totals").at("seconds").get<double>();
        for (const auto& s : j.at("stages")) {
            m.stages.push_back({s.at("name").get<std::string>(), s.at("flops").get<std::uint64_t>(),
                                s.at("seconds").get<double>()});
        }
        const auto base = origin.has_parent_path() ? origin.parent_path() : std::filesystem::path(".");
        for (const auto& s : j.value("sweeps", json::array())) {
            SweepRef ref;
            ref.method = s.at("method").get<std::string>();
            ref.csv = base / s.at("csv").get<std::string>();
            ref.selection.strategy = pruning::parse_cliff(s.at("strategy").get<std::string>());
            ref.selection.min_sparsity = s.value("min_sparsity", ref.selection.min_sparsity);
            ref.selection.fixed_value = s.value("fixed_value", ref.selection.fixed_value);
            ref.selection.drop_threshold = s.value("drop_threshold", ref.selection.drop_threshold);
            ref.cliff = optional_field<double>(s, "cliff");
            m.sweeps.push_back(std::move(ref));
        }
        if (j.contains("report") && j.at("report").is_object()) {
            const auto& r = j.at("report");
            m.performance = optional_field<double>(r, "performance");
            m.size = optional_field<std::size_t>(r, "size");
            m.sparsity = optional_field<double>(r, "sparsity");
            m.tpr = optional_field<double>(r, "tpr");
        }
        return m;
    } catch (const json::exception& e) {
        fail(ErrorCode::ManifestParseError, origin.string() + ": " + e.what());
    } catch (const Error& e) {
        fail(ErrorCode::ManifestParseError, origin.string() + ": " + e.what());
    }
}

Manifest parse_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        fail(ErrorCode::ManifestParseError, path.string() + ": " + e.what());
    }
    return manifest_from_json(j, path);
}

std::string cost_chart_svg(const std::vector<Manifest>& manifests) {
    std::ostringstream os;
    open_svg(os, "Search cost per run");
    double max_flops = 1.0, max_secs = 1e-9;
    for (const auto& m : manifests) {
        max_flops = std::max(max_flops, static_cast<double>(m.flops));
        max_secs = std::max(max_secs, m.seconds);
    }
    const double plot_h = kHeight - 2 * kMargin;
    const double group_w = (kWidth - 2 * kMargin) / static_cast<double>(std::max<std::size_t>(1, manifests.size()));
    const double bar_w = std::min(60.0, group_w / 3);
    const double base_y = kHeight - kMargin;
    os << "<line x1=\"" << kMargin << "\" y1=\"" << base_y << "\" x2=\"" << kWidth - kMargin
       << "\" y2=\"" << base_y << "\" stroke=\"black\"/>\n";
    for (std::size_t i = 0; i < manifests.size(); ++i) {
        const auto& m = manifests[i];
        const double x0 = kMargin + group_w * static_cast<double>(i) + (group_w - 2 * bar_w) / 2;
        const double hf = plot_h * static_cast<double>(m.flops) / max_flops;
        const double hs = plot_h * m.seconds / max_secs;
        os << "<g class=\"run\" data-kind=\"" << escape(m.kind) << "\">\n";
        os << "<rect class=\"flops\" x=\"" << x0 << "\" y=\"" << base_y - hf << "\" width=\"" << bar_w
           << "\" height=\"" << hf << "\" fill=\"#4c72b0\" data-value=\"" << m.flops << "\"/>\n";
        os << "<rect class=\"seconds\" x=\"" << x0 + bar_w << "\" y=\"" << base_y - hs << "\" width=\""
           << bar_w << "\" height=\"" << hs << "\" fill=\"#dd8452\" data-value=\"" << fmt(m.seconds)
           << "\"/>\n";
        os << "<text x=\"" << x0 + bar_w << "\" y=\"" << base_y + 16 << "\" text-anchor=\"middle\">"
           << escape(m.kind + " / " + m.task) << "</text>\n";
        os << "<text x=\"" << x0 + bar_w / 2 << "\" y=\"" << base_y - hf - 4
           << "\" text-anchor=\"middle\">" << fmt(static_cast<double>(m.flops) / 1e9, 3) << " GFLOP</text>\n";
        os << "<text x=\"" << x0 + 1.5 * bar_w << "\" y=\"" << base_y - hs - 4
           << "\" text-anchor=\"middle\">" << fmt(m.seconds, 3) << " s</text>\n";
        os << "</g>\n";
    }
    const auto pp = std::find_if(manifests.begin(), manifests.end(), [](const Manifest& m) { return m.kind == "pp"; });
    const auto app = std::find_if(manifests.begin(), manifests.end(), [](const Manifest& m) { return m.kind == "app"; });
    if (pp != manifests.end() && app != manifests.end() && app->flops > 0) {
        const double ratio = static_cast<double>(pp->flops) / static_cast<double>(app->flops);
        os << "<text class=\"speedup\" data-ratio=\"" << fmt(ratio, 10) << "\" x=\"" << kWidth - kMargin
           << "\" y=\"40\" text-anchor=\"end\">speedup " << fmt(ratio, 3) << "x (PP / APP FLOPs)</text>\n";
    }
    os << "<text x=\"" << kMargin << "\" y=\"40\" fill=\"#4c72b0\">FLOPs</text>\n";
    os << "<text x=\"" << kMargin + 50 << "\" y=\"40\" fill=\"#dd8452\">seconds</text>\n";
    os << "</svg>\n";
    return os.str();
}

std::string sweep_chart_svg(const pruning::SweepCurve& curve, std::optional<double> cliff,
                            const std::string& title) {
    std::ostringstream os;
    open_svg(os, title);
    double lo = 0.0, hi = 100.0;
    for (double v : curve.performance) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double plot_w = kWidth - 2 * kMargin, plot_h = kHeight - 2 * kMargin;
    auto px = [&](double p) { return kMargin + plot_w * p; };
    auto py = [&](double v) { return kHeight - kMargin - plot_h * (v - lo) / (hi - lo); };
    os << "<line x1=\"" << px(0) << "\" y1=\"" << py(lo) << "\" x2=\"" << px(1) << "\" y2=\"" << py(lo)
       << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << px(0) << "\" y1=\"" << py(lo) << "\" x2=\"" << px(0) << "\" y2=\"" << py(hi)
       << "\" stroke=\"black\"/>\n";
    for (double t : {0.0, 0.25, 0.5, 0.75, 1.0}) {
        os << "<text x=\"" << px(t) << "\" y=\"" << py(lo) + 16 << "\" text-anchor=\"middle\">" << fmt(t)
           << "</text>\n";
    }
    os << "<text x=\"" << px(0.5) << "\" y=\"" << kHeight - 8 << "\" text-anchor=\"middle\">sparsity</text>\n";
    os << "<text x=\"" << px(0) - 6 << "\" y=\"" << py(hi) << "\" text-anchor=\"end\">" << fmt(hi, 4)
       << "%</text>\n";
    os << "<text x=\"" << px(0) - 6 << "\" y=\"" << py(lo) << "\" text-anchor=\"end\">" << fmt(lo, 4)
       << "%</text>\n";
    os << "<polyline class=\"performance\" fill=\"none\" stroke=\"#4c72b0\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < curve.grid.size(); ++i) {
        os << (i ? " " : "") << px(curve.grid[i]) << ',' << py(curve.performance[i]);
    }
    os << "\"/>\n";
    if (cliff) {
        os << "<line class=\"cliff\" data-p=\"" << fmt(*cliff, 10) << "\" x1=\"" << px(*cliff) << "\" y1=\""
           << py(lo) << "\" x2=\"" << px(*cliff) << "\" y2=\"" << py(hi)
           << "\" stroke=\"#c44e52\" stroke-dasharray=\"4 3\"/>\n";
        os << "<text x=\"" << px(*cliff) + 4 << "\" y=\"" << py(hi) + 12 << "\" fill=\"#c44e52\">cliff "
           << fmt(*cliff) << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

std::string summary_csv(const std::vector<Manifest>& manifests) {
    std::ostringstream os;
    os << std::setprecision(10);
    os << "p,size,performance_pct,true_positives,kind,task,model_hash,flops,seconds\n";
    for (const auto& m : manifests) {
        if (m.sparsity) os << *m.sparsity;
        os << ',';
        if (m.size) os << *m.size;
        os << ',';
        if (m.performance) os << *m.performance;
        os << ',';
        if (auto tp = m.raw.contains("report") ? optional_field<std::size_t>(m.raw.at("report"), "true_positives")
                                               : std::nullopt) {
            os << *tp;
        }
        os << ',' << m.kind << ',' << m.task << ',' << m.model_hash << ',' << m.flops << ',' << m.seconds
           << '\n';
    }
    return os.str();
}

ReportFiles write_report(const std::vector<Manifest>& manifests, const std::filesystem::path& out_dir) {
    if (manifests.empty()) fail(ErrorCode::InvalidArgument, "report needs at least one manifest");
    std::filesystem::create_directories(out_dir);
    ReportFiles files;
    files.summary = out_dir / "summary.csv";
    write_text(files.summary, summary_csv(manifests));
    files.costs = out_dir / "costs.svg";
    write_text(files.costs, cost_chart_svg(manifests));
    for (std::size_t i = 0; i < manifests.size(); ++i) {
        for (const auto& ref : manifests[i].sweeps) {
            const auto curve = pruning::read_sweep_csv(ref.csv);
            std::optional<double> cliff;
            try {
                cliff = pruning::select_cliff(curve, ref.selection);
            } catch (const Error& e) {
                if (e.code() != ErrorCode::CurveTooShort) throw;
            }
            const auto path = out_dir / ("sweep_" + std::to_string(i) + "_" + ref.method + "_" +
                                          pruning::to_string(ref.selection.strategy) + ".svg");
            write_text(path, sweep_chart_svg(curve, cliff,
                                             manifests[i].kind + " " + ref.method + " sweep, " +
                                                 pruning::to_string(ref.selection.strategy) + " (" +
                                                 manifests[i].task + ")"));
            files.sweeps.push_back(path);
        }
    }
    return files;
}

}  // namespace circuitforge::report
