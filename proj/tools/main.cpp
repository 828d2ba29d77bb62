// depthc: synthetic depth-completion workbench.
//
// Subcommands: gen (synthetic dataset), train, eval, gradcheck, ablate, dump.
// Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 gradient check
// failure.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <sstream>

#include "depthc/config.hpp"
#include "depthc/metrics.hpp"
#include "depthc/network.hpp"
#include "depthc/pgm.hpp"
#include "depthc/synth.hpp"
#include "depthc/training.hpp"

namespace fs = std::filesystem;
using namespace depthc;

namespace {

void write_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << content;
    if (!f) throw IoError("write failed: " + path);
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

struct TrainFileConfig {
    NetworkConfig net;
    TrainConfig train;
    LossConfig loss;
};

TrainFileConfig parse_train_config(const std::string& path) {
    TrainFileConfig out;
    KvReader kv(parse_kv_file(path));
    out.net = network_config_from_kv(kv);
    out.train.lr = kv.take_double("lr", out.train.lr);
    out.train.steps = kv.take_int("steps", out.train.steps);
    out.train.batch_size = kv.take_int("batch", out.train.batch_size);
    out.train.threads = kv.take_int("threads", out.train.threads);
    out.train.seed = out.net.seed;  // one seed drives init, shuffle and dropout
    out.loss.alpha = kv.take_double("alpha", out.loss.alpha);
    out.loss.beta = kv.take_double("beta", out.loss.beta);
    if (!kv.empty()) {
        throw ConfigError(path + ": unknown config key '" + kv.remaining_keys().front() + "'");
    }
    return out;
}

int run_gen(int n, int height, int width, double keep_rate, const std::string& pattern,
            uint64_t seed, const std::string& out_dir, double d_min, double d_max,
            int primitives) {
    SceneConfig sc;
    sc.height = height;
    sc.width = width;
    sc.d_min_mm = d_min;
    sc.d_max_mm = d_max;
    sc.primitives = primitives;
    sc.seed = seed;
    SparsifyConfig sp;
    sp.keep_rate = keep_rate;
    sp.pattern = sparsify_pattern_from_string(pattern);
    sp.seed = seed;
    const std::string manifest = make_dataset(n, sc, sp, out_dir);
    std::cout << "wrote " << n << " samples, manifest " << manifest << "\n";
    return 0;
}

int run_train(const std::string& manifest, const std::string& config_path,
              const std::string& ckpt_out, const std::string& log_out) {
    TrainFileConfig cfg = parse_train_config(config_path);
    auto data = load_dataset(manifest);
    std::vector<TrainLogRow> log;
    Network net = train(data, cfg.net, cfg.train, cfg.loss, &log);
    net.save_checkpoint(ckpt_out);
    if (!log_out.empty()) write_file(log_out, train_log_csv(log));
    std::cout << "trained " << cfg.train.steps << " steps, final loss "
              << (log.empty() ? 0.0 : log.back().loss) << ", checkpoint " << ckpt_out << "\n";
    return 0;
}

int run_eval(const std::string& manifest, const std::string& ckpt,
             const std::string& report_out, std::string per_sample_out) {
    if (per_sample_out.empty()) per_sample_out = report_out + ".per_sample.csv";
    Network net = Network::load_checkpoint(ckpt);
    auto data = load_dataset(manifest);

    MetricsAccumulator pooled;
    std::string per_sample =
        "sample,valid_pixels,rmse_mm,mae_mm,irmse_1perkm,imae_1perkm,excluded_inverse_pixels\n";
    for (size_t i = 0; i < data.size(); ++i) {
        Tape tape(/*recording=*/false);
        ForwardResult fr = net.forward(tape, data[i]);
        pooled.add(fr.refined, data[i].gt);
        MetricsReport r = evaluate(fr.refined, data[i].gt);
        per_sample += std::to_string(i) + "," + std::to_string(r.valid_pixels) + "," +
                      format_double(r.rmse_mm) + "," + format_double(r.mae_mm) + "," +
                      format_double(r.irmse_1perkm) + "," + format_double(r.imae_1perkm) + "," +
                      std::to_string(r.excluded_inverse_pixels) + "\n";
    }
    MetricsReport report = pooled.finalize();
    write_file(report_out, metrics_csv(report));
    if (!per_sample_out.empty()) write_file(per_sample_out, per_sample);
    std::cout << metrics_csv(report);
    if (report.degenerate) std::cout << "warning: no valid pixels\n";
    return 0;
}

int run_gradcheck(const std::string& unit) {
    std::vector<GradCheckReport> reports;
    if (unit.empty()) {
        reports = gradcheck_all();
    } else {
        reports.push_back(gradcheck_unit(unit));
    }
    std::cout << gradcheck_summary(reports);
    for (const auto& r : reports) {
        if (!r.pass) return 3;
    }
    return 0;
}

struct AblateRow {
    NetworkConfig net;
    std::string os, skip, spatial, channel, fusion, refinement;  // echoed verbatim
};

std::vector<AblateRow> parse_grid(const std::string& path, const NetworkConfig& base) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open for reading: " + path);
    std::string header;
    if (!std::getline(f, header) || header != "os,skip,spatial,channel,fusion,refinement") {
        throw ParseError(path + ": expected header os,skip,spatial,channel,fusion,refinement");
    }
    std::vector<AblateRow> rows;
    std::string line;
    int lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        AblateRow row;
        if (!std::getline(ls, row.os, ',') || !std::getline(ls, row.skip, ',') ||
            !std::getline(ls, row.spatial, ',') || !std::getline(ls, row.channel, ',') ||
            !std::getline(ls, row.fusion, ',') || !std::getline(ls, row.refinement, ',')) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": expected 6 fields");
        }
        row.net = base;
        row.net.output_stride = std::stoi(row.os);
        row.net.skip = row.skip == "1";
        row.net.spatial = row.spatial == "1";
        row.net.channel = channel_variant_from_string(row.channel);
        row.net.fusion = fusion_variant_from_string(row.fusion);
        row.net.refinement = row.refinement == "1";
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw ParseError(path + ": no grid rows");
    return rows;
}

int run_ablate(const std::string& manifest, const std::string& grid_path,
               const std::string& out_csv, const std::string& base_config, int steps,
               uint64_t seed, int batch, int jobs) {
    NetworkConfig base;
    TrainConfig tbase;
    LossConfig lbase;
    if (!base_config.empty()) {
        TrainFileConfig cfg = parse_train_config(base_config);
        base = cfg.net;
        tbase = cfg.train;
        lbase = cfg.loss;
    }
    base.seed = seed;
    tbase.seed = seed;
    tbase.steps = steps;
    tbase.batch_size = batch;

    auto data = load_dataset(manifest);
    auto rows = parse_grid(grid_path, base);

    auto run_row = [&](const AblateRow& row) -> std::string {
        std::vector<TrainLogRow> log;
        Network net = train(data, row.net, tbase, lbase, &log);
        MetricsAccumulator pooled;
        for (const auto& sample : data) {
            Tape tape(/*recording=*/false);
            ForwardResult fr = net.forward(tape, sample);
            pooled.add(fr.refined, sample.gt);
        }
        MetricsReport m = pooled.finalize();
        return row.os + "," + row.skip + "," + row.spatial + "," + row.channel + "," +
               row.fusion + "," + row.refinement + "," + std::to_string(count_params(row.net)) +
               "," + format_double(log.empty() ? 0.0 : log.back().loss) + "," +
               format_double(m.rmse_mm) + "," + format_double(m.mae_mm) + "," +
               format_double(m.irmse_1perkm) + "," + format_double(m.imae_1perkm) + "\n";
    };

    std::string csv =
        "os,skip,spatial,channel,fusion,refinement,params,final_loss,rmse_mm,mae_mm,"
        "irmse_1perkm,imae_1perkm\n";
    if (jobs > 1 && rows.size() > 1) {
        std::vector<std::future<std::string>> futures;
        futures.reserve(rows.size());
        for (const auto& row : rows) {
            futures.push_back(std::async(std::launch::async, run_row, row));
        }
        for (auto& f : futures) csv += f.get();  // manifest order
    } else {
        for (const auto& row : rows) csv += run_row(row);
    }
    write_file(out_csv, csv);
    std::cout << csv;
    return 0;
}

int run_dump(const std::string& manifest, const std::string& ckpt, int sample_idx,
             const std::string& layer, const std::string& out_dir) {
    Network net = Network::load_checkpoint(ckpt);
    auto data = load_dataset(manifest);
    if (sample_idx < 0 || static_cast<size_t>(sample_idx) >= data.size()) {
        throw LookupError("sample index " + std::to_string(sample_idx) +
                          " out of range; dataset has " + std::to_string(data.size()));
    }
    auto channels = dump_activations(net, data[static_cast<size_t>(sample_idx)], layer, out_dir);
    std::cout << "wrote " << channels.size() << " channel grids for layer '" << layer
              << "' to " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"synthetic depth-completion workbench"};
    app.require_subcommand(1);

    // gen
    auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
    int g_n = 8, g_h = 32, g_w = 32, g_prims = 6;
    double g_keep = 0.05, g_dmin = 2000.0, g_dmax = 80000.0;
    std::string g_pattern = "uniform", g_out;
    uint64_t g_seed = 1;
    gen->add_option("--n", g_n, "sample count")->check(CLI::PositiveNumber);
    gen->add_option("--height", g_h, "image height (multiple of 16)");
    gen->add_option("--width", g_w, "image width (multiple of 16)");
    gen->add_option("--keep-rate", g_keep, "fraction of labeled pixels kept");
    gen->add_option("--pattern", g_pattern, "uniform | scanline");
    gen->add_option("--seed", g_seed, "base seed");
    gen->add_option("--out", g_out, "output directory")->required();
    gen->add_option("--d-min", g_dmin, "nearest depth [mm]");
    gen->add_option("--d-max", g_dmax, "farthest depth [mm]");
    gen->add_option("--primitives", g_prims, "rectangles per scene");

    // train
    auto* tr = app.add_subcommand("train", "train a network");
    std::string t_data, t_config, t_out, t_log;
    tr->add_option("--data", t_data, "dataset manifest")->required();
    tr->add_option("--config", t_config, "key=value config file")->required();
    tr->add_option("--out", t_out, "checkpoint path")->required();
    tr->add_option("--log", t_log, "training log CSV path");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string e_data, e_ckpt, e_report, e_per_sample;
    ev->add_option("--data", e_data, "dataset manifest")->required();
    ev->add_option("--ckpt", e_ckpt, "checkpoint path")->required();
    ev->add_option("--report", e_report, "pooled metrics CSV path")->required();
    ev->add_option("--per-sample", e_per_sample, "per-sample metrics CSV path");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    std::string c_unit;
    gc->add_option("--unit", c_unit, "single unit to check (default: all)");

    // ablate
    auto* ab = app.add_subcommand("ablate", "train/evaluate a configuration grid");
    std::string a_data, a_grid, a_out, a_config;
    int a_steps = 1000, a_batch = 2, a_jobs = 3;
    uint64_t a_seed = 1;
    ab->add_option("--data", a_data, "dataset manifest")->required();
    ab->add_option("--grid", a_grid, "grid CSV (os,skip,spatial,channel,fusion,refinement)")
        ->required();
    ab->add_option("--out", a_out, "result CSV path")->required();
    ab->add_option("--config", a_config, "base config file for non-grid fields");
    ab->add_option("--steps", a_steps, "training steps per row");
    ab->add_option("--seed", a_seed, "seed for every row");
    ab->add_option("--batch", a_batch, "batch size");
    ab->add_option("--jobs", a_jobs, "rows trained in parallel");

    // dump
    auto* du = app.add_subcommand("dump", "write per-channel activation PGMs");
    std::string d_data, d_ckpt, d_layer, d_out;
    int d_sample = 0;
    du->add_option("--data", d_data, "dataset manifest")->required();
    du->add_option("--ckpt", d_ckpt, "checkpoint path")->required();
    du->add_option("--sample", d_sample, "sample index");
    du->add_option("--layer", d_layer, "layer name")->required();
    du->add_option("--out", d_out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) {
            return run_gen(g_n, g_h, g_w, g_keep, g_pattern, g_seed, g_out, g_dmin, g_dmax,
                           g_prims);
        }
        if (tr->parsed()) return run_train(t_data, t_config, t_out, t_log);
        if (ev->parsed()) return run_eval(e_data, e_ckpt, e_report, e_per_sample);
        if (gc->parsed()) return run_gradcheck(c_unit);
        if (ab->parsed()) {
            return run_ablate(a_data, a_grid, a_out, a_config, a_steps, a_seed, a_batch, a_jobs);
        }
        if (du->parsed()) return run_dump(d_data, d_ckpt, d_sample, d_layer, d_out);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
