#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pgcam/image_io.hpp"
#include "pgcam/localize.hpp"

namespace pgcam {

inline std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

/// Content hash of a manifest file; stored in every report so metrics from
/// different datasets can never be merged into one comparison table.
inline std::uint64_t dataset_fingerprint(const std::string& manifest_path) {
    return fnv1a64(detail::read_bytes(manifest_path));
}

struct ClassificationBlock {
    std::string name; // model/config label
    std::size_t n = 0;
    double accuracy = 0;
    std::vector<double> recall;
    std::vector<std::vector<std::size_t>> confusion; // [true][predicted]

    bool operator==(const ClassificationBlock&) const = default;
};

struct MethodRow {
    std::string name; // "cam", "gradcam", "pgcam:1,4", ...
    double tau = 0;
    double iobb_thresh = 0;
    LocCounts counts;
    LocMetrics metrics;

    bool operator==(const MethodRow&) const = default;
};

struct BoxLine {
    std::string image;
    std::string method;
    std::vector<std::pair<BBox, double>> boxes; // detected box + mean-saliency score

    bool operator==(const BoxLine&) const = default;
};

/// One run's results: config echo, the data it ran on, classification and
/// per-method localization metrics, per-image detections, wall time.
/// Metrics are aggregated over all boxes of the evaluation set (not averaged
/// per image); the counts stored alongside make every number recomputable.
struct RunReport {
    std::uint64_t fingerprint = 0;
    std::vector<std::pair<std::string, std::string>> meta;
    double wall_seconds = 0;
    std::vector<ClassificationBlock> classification;
    std::vector<MethodRow> rows;
    std::vector<BoxLine> boxes;

    bool operator==(const RunReport&) const = default;
};

namespace detail {

inline std::string fmt_double(double v) {
    char buf[32];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

inline double parse_double(std::string_view s, const char* what) {
    double v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
        fail("report: malformed ", what, " '", std::string(s), "'");
    return v;
}

inline std::uint64_t parse_u64(std::string_view s, const char* what) {
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
        fail("report: malformed ", what, " '", std::string(s), "'");
    return v;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t at = s.find(sep, start);
        out.push_back(s.substr(start, at - start));
        if (at == std::string::npos) break;
        start = at + 1;
    }
    return out;
}

/// "key=value" accessor over one report line's tokens.
inline std::string_view field(const std::vector<std::string>& tokens, const std::string& key,
                              const std::string& line) {
    const std::string prefix = key + "=";
    for (const std::string& t : tokens)
        if (t.rfind(prefix, 0) == 0) return std::string_view(t).substr(prefix.size());
    fail("report: line '", line, "' lacks field '", key, "'");
}

} // namespace detail

inline std::string format_report(const RunReport& r) {
    std::ostringstream out;
    char fp[17];
    std::snprintf(fp, sizeof fp, "%016llx", static_cast<unsigned long long>(r.fingerprint));
    out << "pgcam-run-report v1\n";
    out << "fingerprint " << fp << "\n";
    for (const auto& [k, v] : r.meta) {
        if (k.find(' ') != std::string::npos || k.empty())
            fail("report: meta key '", k, "' must be a single word");
        if (v.find('\n') != std::string::npos)
            fail("report: meta value for '", k, "' must be a single line");
        out << "meta " << k << " " << v << "\n";
    }
    out << "timing " << detail::fmt_double(r.wall_seconds) << "\n";
    for (const auto& c : r.classification) {
        out << "classification name=" << c.name << " n=" << c.n
            << " acc=" << detail::fmt_double(c.accuracy) << " recall=";
        for (std::size_t i = 0; i < c.recall.size(); ++i)
            out << (i ? "," : "") << detail::fmt_double(c.recall[i]);
        out << " confusion=";
        for (std::size_t i = 0; i < c.confusion.size(); ++i) {
            if (i) out << "/";
            for (std::size_t j = 0; j < c.confusion[i].size(); ++j)
                out << (j ? "," : "") << c.confusion[i][j];
        }
        out << "\n";
    }
    for (const auto& row : r.rows) {
        if (row.name.find(' ') != std::string::npos || row.name.empty())
            fail("report: method name '", row.name, "' must be a single word");
        out << "row name=" << row.name << " tau=" << detail::fmt_double(row.tau)
            << " iobb=" << detail::fmt_double(row.iobb_thresh) << " tp=" << row.counts.tp
            << " fp=" << row.counts.fp << " fn=" << row.counts.fn
            << " precision=" << detail::fmt_double(row.metrics.precision)
            << " accuracy=" << detail::fmt_double(row.metrics.accuracy)
            << " f1=" << detail::fmt_double(row.metrics.f1) << "\n";
    }
    for (const auto& b : r.boxes) {
        out << "boxes " << b.image << " " << b.method;
        for (const auto& [box, score] : b.boxes)
            out << " " << box.x0 << "," << box.y0 << "," << box.x1 << "," << box.y1 << ","
                << detail::fmt_double(score);
        out << "\n";
    }
    out << "end\n";
    return out.str();
}

inline RunReport parse_report(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "pgcam-run-report v1")
        fail("report: missing 'pgcam-run-report v1' header line");
    RunReport r;
    bool have_fp = false, ended = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (ended) fail("report: content after 'end' line");
        if (line == "end") {
            ended = true;
            continue;
        }
        const std::size_t sp = line.find(' ');
        const std::string kind = line.substr(0, sp);
        const std::string rest = sp == std::string::npos ? "" : line.substr(sp + 1);
        const std::vector<std::string> tokens = detail::split(rest, ' ');
        if (kind == "fingerprint") {
            if (rest.size() != 16) fail("report: fingerprint '", rest, "' must be 16 hex digits");
            std::uint64_t v = 0;
            auto [p, ec] = std::from_chars(rest.data(), rest.data() + 16, v, 16);
            if (ec != std::errc() || p != rest.data() + 16)
                fail("report: malformed fingerprint '", rest, "'");
            r.fingerprint = v;
            have_fp = true;
        } else if (kind == "meta") {
            const std::size_t ksp = rest.find(' ');
            if (ksp == std::string::npos) fail("report: meta line '", line, "' lacks a value");
            r.meta.emplace_back(rest.substr(0, ksp), rest.substr(ksp + 1));
        } else if (kind == "timing") {
            r.wall_seconds = detail::parse_double(rest, "timing");
        } else if (kind == "classification") {
            ClassificationBlock c;
            c.name = std::string(detail::field(tokens, "name", line));
            c.n = detail::parse_u64(detail::field(tokens, "n", line), "sample count");
            c.accuracy = detail::parse_double(detail::field(tokens, "acc", line), "accuracy");
            for (const std::string& v :
                 detail::split(std::string(detail::field(tokens, "recall", line)), ','))
                c.recall.push_back(detail::parse_double(v, "recall"));
            for (const std::string& rowtext :
                 detail::split(std::string(detail::field(tokens, "confusion", line)), '/')) {
                std::vector<std::size_t> counts;
                for (const std::string& v : detail::split(rowtext, ','))
                    counts.push_back(detail::parse_u64(v, "confusion count"));
                c.confusion.push_back(std::move(counts));
            }
            r.classification.push_back(std::move(c));
        } else if (kind == "row") {
            MethodRow row;
            row.name = std::string(detail::field(tokens, "name", line));
            row.tau = detail::parse_double(detail::field(tokens, "tau", line), "tau");
            row.iobb_thresh = detail::parse_double(detail::field(tokens, "iobb", line), "iobb");
            row.counts.tp = detail::parse_u64(detail::field(tokens, "tp", line), "tp");
            row.counts.fp = detail::parse_u64(detail::field(tokens, "fp", line), "fp");
            row.counts.fn = detail::parse_u64(detail::field(tokens, "fn", line), "fn");
            row.metrics.precision =
                detail::parse_double(detail::field(tokens, "precision", line), "precision");
            row.metrics.accuracy =
                detail::parse_double(detail::field(tokens, "accuracy", line), "accuracy");
            row.metrics.f1 = detail::parse_double(detail::field(tokens, "f1", line), "f1");
            r.rows.push_back(std::move(row));
        } else if (kind == "boxes") {
            if (tokens.size() < 2) fail("report: boxes line '", line, "' lacks image/method");
            BoxLine b;
            b.image = tokens[0];
            b.method = tokens[1];
            for (std::size_t i = 2; i < tokens.size(); ++i) {
                const auto parts = detail::split(tokens[i], ',');
                if (parts.size() != 5) fail("report: malformed box '", tokens[i], "'");
                BBox box{int(detail::parse_u64(parts[0], "box x0")),
                         int(detail::parse_u64(parts[1], "box y0")),
                         int(detail::parse_u64(parts[2], "box x1")),
                         int(detail::parse_u64(parts[3], "box y1"))};
                b.boxes.emplace_back(box, detail::parse_double(parts[4], "box score"));
            }
            r.boxes.push_back(std::move(b));
        } else {
            fail("report: unknown line kind '", kind, "'");
        }
    }
    if (!ended) fail("report: missing 'end' line (truncated file?)");
    if (!have_fp) fail("report: missing fingerprint line");
    return r;
}

inline void write_report(const RunReport& r, const std::string& path) {
    detail::write_bytes_atomic(path, format_report(r));
}

inline RunReport read_report(const std::string& path) {
    return parse_report(detail::read_bytes(path));
}

/// Concatenate runs over the same dataset into one comparison table.
inline RunReport merge_reports(const std::vector<RunReport>& inputs) {
    if (inputs.empty()) fail("report: nothing to merge");
    RunReport out;
    out.fingerprint = inputs[0].fingerprint;
    for (const RunReport& r : inputs) {
        if (r.fingerprint != out.fingerprint)
            fail("report: dataset fingerprint mismatch (", inputs[0].fingerprint, " vs ",
                 r.fingerprint, "); runs over different manifests cannot be compared");
        out.wall_seconds += r.wall_seconds;
        out.meta.insert(out.meta.end(), r.meta.begin(), r.meta.end());
        out.classification.insert(out.classification.end(), r.classification.begin(),
                                  r.classification.end());
        out.rows.insert(out.rows.end(), r.rows.begin(), r.rows.end());
        out.boxes.insert(out.boxes.end(), r.boxes.begin(), r.boxes.end());
    }
    return out;
}

} // namespace pgcam
