// pgcam: phantom data generation, weakly-supervised training, saliency
// extraction, and box-level localization scoring, end to end.

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pgcam/cam.hpp"
#include "pgcam/checkpoint.hpp"
#include "pgcam/image_io.hpp"
#include "pgcam/localize.hpp"
#include "pgcam/model.hpp"
#include "pgcam/phantom.hpp"
#include "pgcam/report.hpp"
#include "pgcam/train.hpp"

namespace fs = std::filesystem;
using Scalar = float; // training and inference precision for the tool

namespace {

std::string default_out_dir() {
    const char* env = std::getenv("PGCAM_OUT_DIR");
    return env && *env ? env : ".";
}

std::set<std::size_t> parse_scales(const std::string& text) {
    std::set<std::size_t> out;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, ',')) {
        if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos)
            pgcam::fail("--scales: '", text, "' is not a comma-separated list of scale numbers");
        out.insert(std::size_t(std::stoul(part)));
    }
    if (out.empty()) pgcam::fail("--scales: empty scale list");
    return out;
}

std::string scales_label(const std::set<std::size_t>& scales) {
    std::string s;
    for (std::size_t p : scales) s += (s.empty() ? "" : ",") + std::to_string(p);
    return s;
}

pgcam::Tensor<Scalar> load_image_as_batch(const std::string& path) {
    const pgcam::GrayImage img = pgcam::read_pgm(path);
    pgcam::Tensor<Scalar> t({1, 1, img.h, img.w});
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
        t.data[i] = Scalar(img.pixels[i]) / Scalar(255);
    return t;
}

struct CamArgs {
    std::string checkpoint, image, method = "pgcam", scales_text, out_map, out_png;
    std::size_t cls = 1;
};

pgcam::SaliencyMap extract_map(pgcam::Model<Scalar>& model, const pgcam::Tensor<Scalar>& image,
                               const std::string& method, const std::set<std::size_t>& scales,
                               std::size_t cls) {
    if (method == "cam") return pgcam::cam(model, image, cls);
    if (method == "gradcam") {
        if (scales.size() > 1)
            pgcam::fail("gradcam extracts one scale at a time; use --method pgcam to fuse "
                        "scales ",
                        scales_label(scales));
        const std::size_t p = scales.empty() ? model.final_tap_scale() : *scales.begin();
        return pgcam::grad_cam(model, image, cls, p);
    }
    if (method == "pgcam")
        return pgcam::pg_cam(model, image, cls,
                             scales.empty() ? model.tappable_scales() : scales);
    pgcam::fail("unknown method '", method, "' (expected cam, gradcam, or pgcam)");
}

int cmd_gen_data(const std::string& out, std::uint64_t seed, std::size_t train_n,
                 std::size_t val_n, std::size_t loc_n, int size, double prevalence) {
    pgcam::PhantomConfig cfg;
    cfg.image_size = size;
    cfg.prevalence = prevalence;
    cfg.seed = seed;
    const pgcam::DatasetPaths paths = pgcam::write_dataset(cfg, train_n, val_n, loc_n, out);
    std::cout << paths.train_manifest << "\n"
              << paths.val_manifest << "\n"
              << paths.loc_manifest << "\n";
    return 0;
}

int cmd_train(const std::string& model_name, const std::string& dense, const std::string& data,
              pgcam::TrainConfig cfg, std::size_t scales, std::size_t base_channels,
              const std::string& out_checkpoint, std::string log_path) {
    pgcam::ModelKind kind;
    if (model_name == "dcfpn")
        kind = pgcam::ModelKind::dcfpn;
    else if (model_name == "baseline")
        kind = pgcam::ModelKind::baseline;
    else
        pgcam::fail("--model must be dcfpn or baseline, got '", model_name, "'");
    if (dense != "on" && dense != "off")
        pgcam::fail("--dense must be on or off, got '", dense, "'");

    if (cfg.checkpoint_every > 0 && cfg.checkpoint_path.empty())
        cfg.checkpoint_path = out_checkpoint;

    const auto train_ds =
        pgcam::load_dataset<Scalar>((fs::path(data) / "train.tsv").string());
    const auto val_ds = pgcam::load_dataset<Scalar>((fs::path(data) / "val.tsv").string());
    if (train_ds.size() == 0) pgcam::fail("training manifest is empty");

    pgcam::ModelConfig mc;
    mc.input_size = train_ds.images[0].shape[1];
    mc.scales = scales;
    mc.base_channels = base_channels;
    mc.dense = dense == "on";
    pgcam::Model<Scalar> model = pgcam::build_model<Scalar>(kind, mc, cfg.seed);
    pgcam::AdamState<Scalar> opt = pgcam::AdamState<Scalar>::zeros_like(model);

    std::ostringstream log;
    const pgcam::TrainHistory history =
        pgcam::train(model, train_ds, val_ds, cfg, opt, 0, &log);

    const pgcam::NamedTensors<Scalar> extra = opt.to_named();
    pgcam::save_checkpoint(model, out_checkpoint, &extra);
    if (log_path.empty()) log_path = out_checkpoint + ".log.tsv";
    pgcam::detail::write_bytes_atomic(log_path, log.str());

    std::cout << "checkpoint " << out_checkpoint << "\n";
    std::cout << "log " << log_path << "\n";
    if (!history.val.empty()) {
        const pgcam::EvalResult final_eval = pgcam::evaluate_classification(model, val_ds);
        std::cout << "val-accuracy " << final_eval.accuracy << "\n";
        for (std::size_t c = 0; c < final_eval.recall.size(); ++c)
            std::cout << "val-recall-class" << c << " " << final_eval.recall[c] << "\n";
    }
    return 0;
}

int cmd_cam(const CamArgs& a) {
    const std::set<std::size_t> scales =
        a.scales_text.empty() ? std::set<std::size_t>{} : parse_scales(a.scales_text);
    if (a.method == "cam" && !scales.empty())
        pgcam::fail("--scales does not apply to cam; it always reads the final tap");
    if (a.method == "gradcam" && scales.size() > 1)
        pgcam::fail("gradcam extracts one scale at a time; use --method pgcam to fuse scales ",
                    scales_label(scales));
    if (a.out_map.empty() && a.out_png.empty())
        pgcam::fail("nothing to write: pass --out-map and/or --out-png");
    auto loaded = pgcam::load_checkpoint<Scalar>(a.checkpoint);
    const pgcam::Tensor<Scalar> image = load_image_as_batch(a.image);

    const pgcam::SaliencyMap map = extract_map(loaded.model, image, a.method, scales, a.cls);
    if (!a.out_map.empty()) {
        pgcam::write_pgsm(a.out_map, map);
        std::cout << "map " << a.out_map << "\n";
    }
    if (!a.out_png.empty()) {
        pgcam::write_png_gray(a.out_png, pgcam::render_gray(map));
        std::cout << "png " << a.out_png << "\n";
    }
    return 0;
}

int cmd_localize(const std::string& checkpoint, const std::string& manifest,
                 const std::string& method, const std::string& scales_text, double tau,
                 double iobb_thresh, std::size_t min_area, const std::string& out_report) {
    const auto t0 = std::chrono::steady_clock::now();
    auto loaded = pgcam::load_checkpoint<Scalar>(checkpoint);
    pgcam::Model<Scalar>& model = loaded.model;

    const auto entries = pgcam::read_manifest(manifest);
    if (entries.empty()) pgcam::fail("manifest '", manifest, "' is empty");
    bool any_boxes = false;
    for (const auto& e : entries) {
        if (e.label == 1 && e.boxes.empty())
            pgcam::fail("manifest '", manifest,
                        "' has a positive entry without ground-truth boxes ('", e.path,
                        "'); localization needs the box-annotated evaluation split");
        any_boxes = any_boxes || !e.boxes.empty();
    }
    if (!any_boxes)
        pgcam::fail("manifest '", manifest, "' carries no ground-truth boxes at all");

    std::set<std::size_t> scales =
        scales_text.empty() ? std::set<std::size_t>{} : parse_scales(scales_text);
    if (method == "pgcam" && scales.empty()) scales = model.tappable_scales();

    // per-method detection threshold defaults follow the pyramid/plain split
    if (tau < 0) tau = method == "pgcam" ? 0.4 : 0.8;

    std::string row_name = method;
    if (method == "pgcam")
        row_name += ":" + scales_label(scales);
    else if (method == "gradcam" && !scales.empty())
        row_name += ":" + scales_label(scales);

    const fs::path manifest_dir = fs::path(manifest).parent_path();
    pgcam::LocCounts counts;
    pgcam::RunReport report;
    pgcam::Dataset<Scalar> cls_ds;

    for (const auto& e : entries) {
        const pgcam::Tensor<Scalar> image =
            load_image_as_batch((manifest_dir / e.path).string());
        const pgcam::SaliencyMap raw = extract_map(model, image, method, scales, 1);
        const pgcam::SaliencyMap norm = pgcam::normalize_map(raw);
        const std::vector<pgcam::BBox> preds =
            pgcam::tight_boxes(pgcam::connected_components(pgcam::threshold_mask(norm, tau)),
                               min_area);
        counts += pgcam::match_and_score(preds, e.boxes, iobb_thresh);

        if (!preds.empty()) {
            pgcam::BoxLine line;
            line.image = e.path;
            line.method = row_name;
            for (const pgcam::BBox& b : preds)
                line.boxes.emplace_back(b, pgcam::box_score(norm, b));
            report.boxes.push_back(std::move(line));
        }

        pgcam::Tensor<Scalar> img3({1, image.shape[2], image.shape[3]});
        img3.data = image.data;
        cls_ds.images.push_back(std::move(img3));
        cls_ds.labels.push_back(e.label);
        cls_ds.boxes.push_back(e.boxes);
    }

    const pgcam::EvalResult eval = pgcam::evaluate_classification(model, cls_ds);
    pgcam::ClassificationBlock cb;
    cb.name = pgcam::model_kind_name(model.kind());
    cb.n = eval.n;
    cb.accuracy = eval.accuracy;
    cb.recall = eval.recall;
    cb.confusion = eval.confusion;
    report.classification.push_back(std::move(cb));

    pgcam::MethodRow row;
    row.name = row_name;
    row.tau = tau;
    row.iobb_thresh = iobb_thresh;
    row.counts = counts;
    row.metrics = pgcam::loc_metrics(counts);
    report.rows.push_back(row);

    report.fingerprint = pgcam::dataset_fingerprint(manifest);
    report.meta = {{"checkpoint", checkpoint},
                   {"manifest", manifest},
                   {"model", pgcam::model_kind_name(model.kind())},
                   {"method", row_name},
                   {"min-area", std::to_string(min_area)},
                   {"aggregation", "counts pooled over all evaluation boxes"}};
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    pgcam::write_report(report, out_report);
    std::cout << "report " << out_report << "\n";
    std::cout << row.name << " precision " << row.metrics.precision << " accuracy "
              << row.metrics.accuracy << " f1 " << row.metrics.f1 << "\n";
    return 0;
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& out) {
    std::vector<pgcam::RunReport> reports;
    for (const std::string& path : inputs) reports.push_back(pgcam::read_report(path));
    const pgcam::RunReport merged = pgcam::merge_reports(reports);
    pgcam::write_report(merged, out);

    std::cout << "report " << out << "\n";
    std::printf("%-16s %9s %9s %9s %5s %5s %5s\n", "method", "precision", "accuracy", "f1",
                "tp", "fp", "fn");
    for (const auto& row : merged.rows)
        std::printf("%-16s %9.3f %9.3f %9.3f %5zu %5zu %5zu\n", row.name.c_str(),
                    row.metrics.precision, row.metrics.accuracy, row.metrics.f1, row.counts.tp,
                    row.counts.fp, row.counts.fn);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"weakly-supervised tumor localization via pyramid gradient activation maps"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic phantom dataset");
    std::string gen_out = default_out_dir() + "/data";
    std::uint64_t gen_seed = 0;
    std::size_t train_n = 2000, val_n = 400, loc_n = 100;
    int gen_size = 64;
    double prevalence = 0.15;
    gen->add_option("--out", gen_out, "output directory");
    gen->add_option("--seed", gen_seed, "generation seed");
    gen->add_option("--train-n", train_n, "training split size");
    gen->add_option("--val-n", val_n, "validation split size");
    gen->add_option("--loc-n", loc_n, "box-annotated localization split size");
    gen->add_option("--size", gen_size, "square image extent");
    gen->add_option("--prevalence", prevalence, "fraction of images carrying a lesion");

    // train
    auto* tr = app.add_subcommand("train", "train a classifier on image-level labels");
    std::string model_name = "dcfpn", dense = "on", data_dir = default_out_dir() + "/data";
    std::string out_ckpt = default_out_dir() + "/model.pgck", log_path;
    pgcam::TrainConfig tc;
    std::size_t pyramid_scales = 4, base_channels = 8;
    tr->add_option("--model", model_name, "dcfpn or baseline");
    tr->add_option("--dense", dense, "dense connections: on or off");
    tr->add_option("--data", data_dir, "directory holding train.tsv and val.tsv");
    tr->add_option("--iters", tc.max_iterations, "total optimizer iterations");
    tr->add_option("--batch", tc.batch_size, "batch size");
    tr->add_option("--seed", tc.seed, "training seed (init, shuffling)");
    tr->add_option("--lr", tc.base_lr, "base learning rate");
    tr->add_option("--decay-every", tc.decay_every, "iterations between lr decays");
    tr->add_option("--pyramid-scales", pyramid_scales, "pyramid depth of the model");
    tr->add_option("--base-channels", base_channels, "channel width at the finest scale");
    tr->add_option("--checkpoint-every", tc.checkpoint_every,
                   "cadence of mid-run checkpoints (0 = final only)");
    tr->add_option("--out-checkpoint", out_ckpt, "checkpoint file to write");
    tr->add_option("--log", log_path, "training log path (default <checkpoint>.log.tsv)");
    tr->add_flag("--balanced", tc.balanced_sampler, "draw class-balanced batches");

    // cam
    auto* cm = app.add_subcommand("cam", "extract a saliency map for one image");
    CamArgs ca;
    cm->add_option("--checkpoint", ca.checkpoint, "trained checkpoint")->required();
    cm->add_option("--image", ca.image, "input image (P5 graymap)")->required();
    cm->add_option("--method", ca.method, "cam, gradcam, or pgcam");
    cm->add_option("--scales", ca.scales_text, "scale subset, e.g. 1 or 1,4");
    cm->add_option("--class", ca.cls, "class index to explain");
    cm->add_option("--out-map", ca.out_map, "raw float map file to write");
    cm->add_option("--out-png", ca.out_png, "grayscale rendering to write");

    // localize
    auto* loc = app.add_subcommand("localize", "score box localization over a manifest");
    std::string loc_ckpt, loc_manifest, loc_method = "pgcam", loc_scales;
    double tau = -1.0, iobb_thresh = 0.2;
    std::size_t min_area = 4;
    std::string out_report = default_out_dir() + "/run.report";
    loc->add_option("--checkpoint", loc_ckpt, "trained checkpoint")->required();
    loc->add_option("--manifest", loc_manifest, "box-annotated manifest")->required();
    loc->add_option("--method", loc_method, "cam, gradcam, or pgcam");
    loc->add_option("--scales", loc_scales, "scale subset for pgcam/gradcam");
    loc->add_option("--tau", tau, "detection threshold (default 0.4 pgcam, 0.8 otherwise)");
    loc->add_option("--iobb", iobb_thresh, "IOBB match threshold");
    loc->add_option("--min-area", min_area, "drop detections smaller than this many pixels");
    loc->add_option("--out-report", out_report, "report file to write");

    // report
    auto* rp = app.add_subcommand("report", "merge run reports into one comparison table");
    std::vector<std::string> inputs;
    std::string merged_out = default_out_dir() + "/merged.report";
    rp->add_option("--inputs", inputs, "report files to merge")->required()->expected(-1);
    rp->add_option("--out", merged_out, "merged report to write");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed())
            return cmd_gen_data(gen_out, gen_seed, train_n, val_n, loc_n, gen_size, prevalence);
        if (tr->parsed())
            return cmd_train(model_name, dense, data_dir, tc, pyramid_scales, base_channels,
                             out_ckpt, log_path);
        if (cm->parsed()) return cmd_cam(ca);
        if (loc->parsed())
            return cmd_localize(loc_ckpt, loc_manifest, loc_method, loc_scales, tau,
                                iobb_thresh, min_area, out_report);
        if (rp->parsed()) return cmd_report(inputs, merged_out);
    } catch (const pgcam::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
