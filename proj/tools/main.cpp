// poiattrib: end-to-end point-of-interest attribution pipeline.
//
// Subcommands: gen-synthetic | fit-kde | train | attribute | evaluate |
// baseline | gradcheck. Every randomized subcommand takes an explicit --seed;
// outputs are deterministic byte-for-byte given the same inputs and seed.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "poiattrib/baselines.hpp"
#include "poiattrib/csv.hpp"
#include "poiattrib/dataset.hpp"
#include "poiattrib/eval.hpp"
#include "poiattrib/kde.hpp"
#include "poiattrib/model.hpp"
#include "poiattrib/scorer.hpp"
#include "poiattrib/synthetic.hpp"
#include "poiattrib/train.hpp"

namespace pa = poiattrib;

namespace {

int error_exit_code(const pa::Error& e) {
  switch (e.kind()) {
    case pa::ErrorKind::io:
    case pa::ErrorKind::corrupt:
    case pa::ErrorKind::version_mismatch:
    case pa::ErrorKind::vocab_mismatch:
      return 2;
    default:
      return 1;
  }
}

std::vector<double> parse_sigma_list(const std::string& spec) {
  std::vector<double> out;
  for (const auto& tok : pa::detail::split(spec, ',')) {
    if (tok.empty()) continue;
    out.push_back(pa::detail::parse_double(tok, "--noise-sigma", 0));
  }
  if (out.empty())
    throw pa::Error(pa::ErrorKind::validation, "--noise-sigma needs at least one value");
  return out;
}

nlohmann::json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw pa::Error(pa::ErrorKind::io, "cannot open '" + path + "' for reading");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw pa::Error(pa::ErrorKind::parse, "'" + path + "': " + e.what());
  }
}

void write_json_file(const nlohmann::json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw pa::Error(pa::ErrorKind::io, "cannot open '" + path + "' for writing");
  out << j.dump(2) << "\n";
  if (!out) throw pa::Error(pa::ErrorKind::io, "error writing '" + path + "'");
}

struct DatasetInputs {
  pa::PoiCatalog catalog;
  std::vector<pa::Trajectory> trajectories;
};

DatasetInputs load_inputs(const std::string& pois_path, const std::string& stays_path) {
  DatasetInputs in;
  in.catalog = pa::load_pois(pois_path);
  in.trajectories = pa::load_stays(stays_path);
  return in;
}

// Model hyper-parameter flags shared by train and gradcheck.
struct ModelFlags {
  int d_s = 0, d_t = 0, d_c = 0, space_scales = 0;
  double lambda_min = 0, lambda_max = 0;
  int layers = 0, heads = 0, d_ff = 0, window = 0, candidate_k = 0;
  double dropout = 0, radius_m = 0;
  bool causal = false, kde_off = false, prior_off = false, mean_categories = false;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--d-s", d_s, "space embedding width");
    cmd->add_option("--d-t", d_t, "each time embedding width");
    cmd->add_option("--d-c", d_c, "category embedding width");
    cmd->add_option("--space-scales", space_scales, "spatial wavelength levels");
    cmd->add_option("--lambda-min", lambda_min, "shortest spatial wavelength (m)");
    cmd->add_option("--lambda-max", lambda_max, "longest spatial wavelength (m)");
    cmd->add_option("--layers", layers, "encoder blocks");
    cmd->add_option("--heads", heads, "attention heads");
    cmd->add_option("--d-ff", d_ff, "feed-forward width");
    cmd->add_option("--dropout", dropout, "dropout rate");
    cmd->add_option("--window", window, "context window (stays)");
    cmd->add_option("--radius-m", radius_m, "candidate radius (m)");
    cmd->add_option("--candidate-k", candidate_k, "max candidates per stay");
    cmd->add_flag("--causal", causal, "causal attention instead of bidirectional");
    cmd->add_flag("--kde-off", kde_off, "drop the crowd-likelihood term");
    cmd->add_flag("--prior-off", prior_off, "drop the learned-prior term");
    cmd->add_flag("--mean-categories", mean_categories,
                  "average score terms over a POI's categories instead of summing");
  }

  void apply(CLI::App* cmd, pa::ModelConfig& mc) const {
    if (cmd->count("--d-s")) mc.enc.d_s = d_s;
    if (cmd->count("--d-t")) mc.enc.d_t = d_t;
    if (cmd->count("--d-c")) mc.enc.d_c = d_c;
    if (cmd->count("--space-scales")) mc.enc.space_scales = space_scales;
    if (cmd->count("--lambda-min")) mc.enc.lambda_min_m = lambda_min;
    if (cmd->count("--lambda-max")) mc.enc.lambda_max_m = lambda_max;
    if (cmd->count("--layers")) mc.layers = layers;
    if (cmd->count("--heads")) mc.heads = heads;
    if (cmd->count("--d-ff")) mc.d_ff = d_ff;
    if (cmd->count("--dropout")) mc.dropout = dropout;
    if (cmd->count("--window")) mc.context_window = window;
    if (cmd->count("--radius-m")) mc.candidate_radius_m = radius_m;
    if (cmd->count("--candidate-k")) mc.candidate_k = candidate_k;
    if (causal) mc.causal = true;
    if (kde_off) mc.kde_term = false;
    if (prior_off) mc.prior_term = false;
    if (mean_categories) mc.mean_categories = true;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"point-of-interest attribution: learned category prior x "
               "per-category spatiotemporal density"};
  app.require_subcommand(1);
  app.set_version_flag("--version",
                       std::string("poiattrib (checkpoint format v") +
                           std::to_string(pa::AttributionModel::kCheckpointFormatVersion) +
                           ", density bank format v" +
                           std::to_string(pa::kBankFormatVersion) + ")");

  // ---- gen-synthetic ----
  auto* gen = app.add_subcommand("gen-synthetic", "generate a labeled synthetic dataset");
  struct {
    std::string config, out;
    std::uint64_t seed = 0;
    int users = 0, pois = 0, categories = 0, days = 0, stays_per_day = 0;
    double extent_m = 0, concentration = 0, hour_stddev = 0;
  } g;
  gen->add_option("--config", g.config, "JSON config (flags override fields)");
  gen->add_option("--out", g.out, "output directory")->required();
  gen->add_option("--seed", g.seed, "rng seed")->required();
  gen->add_option("--users", g.users, "number of users");
  gen->add_option("--pois", g.pois, "number of POIs");
  gen->add_option("--categories", g.categories, "number of categories");
  gen->add_option("--days", g.days, "days of activity");
  gen->add_option("--extent-m", g.extent_m, "side of the square area (m)");
  gen->add_option("--stays-per-day", g.stays_per_day, "stays per user per day");
  gen->add_option("--concentration", g.concentration, "user preference concentration");
  gen->add_option("--hour-stddev", g.hour_stddev, "hour-of-day stddev for every category");
  gen->callback([&] {
    pa::SyntheticConfig cfg;
    if (!g.config.empty()) cfg = load_json_file(g.config).get<pa::SyntheticConfig>();
    cfg.rng_seed = g.seed;
    if (gen->count("--users")) cfg.n_users = g.users;
    if (gen->count("--pois")) cfg.n_pois = g.pois;
    if (gen->count("--categories")) cfg.n_categories = g.categories;
    if (gen->count("--days")) cfg.days = g.days;
    if (gen->count("--extent-m")) cfg.extent_m = g.extent_m;
    if (gen->count("--stays-per-day")) cfg.stays_per_user_day = g.stays_per_day;
    if (gen->count("--concentration")) cfg.preference_concentration = g.concentration;
    if (gen->count("--hour-stddev"))
      cfg.category_hour_stddevs.assign(static_cast<std::size_t>(cfg.n_categories),
                                       g.hour_stddev);
    std::filesystem::create_directories(g.out);
    const pa::SyntheticDataset data = pa::generate_synthetic(cfg);
    pa::write_synthetic(data, cfg, g.out);
    std::size_t n_stays = 0;
    for (const auto& t : data.trajectories) n_stays += t.stays.size();
    std::fprintf(stderr, "wrote %zu pois, %zu users, %zu stays to %s\n",
                 data.catalog.pois.size(), data.trajectories.size(), n_stays,
                 g.out.c_str());
  });

  // ---- fit-kde ----
  auto* fit = app.add_subcommand("fit-kde", "fit per-category density bank");
  struct {
    std::string pois, stays, out;
    std::uint64_t seed = 0;
    std::size_t cap = 0;
    double floor = 0;
    bool cyclic = false;
  } f;
  fit->add_option("--pois", f.pois, "POI catalog CSV")->required();
  fit->add_option("--stays", f.stays, "labeled training stays CSV")->required();
  fit->add_option("--out", f.out, "output bank path (.pkde)")->required();
  fit->add_option("--seed", f.seed, "subsample seed (default 0)");
  fit->add_option("--subsample-cap", f.cap, "max points per category");
  fit->add_option("--floor", f.floor, "log-density floor");
  fit->add_flag("--cyclic-hour", f.cyclic, "encode hour as (sin, cos) instead of a scalar");
  fit->callback([&] {
    auto in = load_inputs(f.pois, f.stays);
    pa::KdeOptions opts;
    opts.hour_mode = f.cyclic ? pa::HourFeature::cyclic : pa::HourFeature::scalar;
    opts.subsample_seed = f.seed;
    if (fit->count("--subsample-cap")) opts.subsample_cap = f.cap;
    if (fit->count("--floor")) opts.floor_log_density = f.floor;
    const pa::KdeBank bank = pa::fit_kde_bank(in.trajectories, in.catalog, opts);
    pa::save_bank(bank, f.out);
    std::size_t fitted = 0;
    for (const auto& kde : bank.kdes)
      if (!kde.empty) ++fitted;
    std::fprintf(stderr, "fitted %zu/%zu category densities -> %s\n", fitted,
                 bank.kdes.size(), f.out.c_str());
  });

  // ---- train ----
  auto* tr = app.add_subcommand("train", "train the attribution model");
  struct {
    std::string pois, stays, bank, out, metrics, config;
    std::uint64_t seed = 0;
    int epochs = 0, batch = 0;
    double lr = 0, wd = 0, jitter = 0;
  } t;
  ModelFlags tmf;
  tr->add_option("--pois", t.pois, "POI catalog CSV")->required();
  tr->add_option("--stays", t.stays, "labeled training stays CSV")->required();
  tr->add_option("--bank", t.bank, "fitted density bank (.pkde)")->required();
  tr->add_option("--out", t.out, "output checkpoint path (.pfmr)")->required();
  tr->add_option("--seed", t.seed, "rng seed")->required();
  tr->add_option("--metrics", t.metrics, "per-epoch metrics JSONL path");
  tr->add_option("--config", t.config, "JSON config (flags override fields)");
  tr->add_option("--epochs", t.epochs, "training epochs");
  tr->add_option("--batch-size", t.batch, "examples per optimizer step");
  tr->add_option("--lr", t.lr, "learning rate");
  tr->add_option("--weight-decay", t.wd, "decoupled weight decay");
  tr->add_option("--jitter-sigma", t.jitter, "train-time coordinate jitter stddev (deg)");
  tmf.add_to(tr);
  tr->callback([&] {
    auto in = load_inputs(t.pois, t.stays);
    const double t0 = pa::earliest_arrival_epoch(in.trajectories);
    pa::normalize_timestamps(in.trajectories, t0);
    const pa::KdeBank bank = pa::load_bank(t.bank, &in.catalog.vocab);

    pa::ModelConfig mc;
    pa::TrainConfig tc;
    if (!t.config.empty()) {
      const nlohmann::json j = load_json_file(t.config);
      mc = j.get<pa::ModelConfig>();
      tc.epochs = j.value("epochs", tc.epochs);
      tc.batch_size = j.value("batch_size", tc.batch_size);
      tc.learning_rate = j.value("learning_rate", tc.learning_rate);
      tc.weight_decay = j.value("weight_decay", tc.weight_decay);
      tc.jitter_sigma_deg = j.value("jitter_sigma_deg", tc.jitter_sigma_deg);
    }
    tmf.apply(tr, mc);
    if (tr->count("--epochs")) tc.epochs = t.epochs;
    if (tr->count("--batch-size")) tc.batch_size = t.batch;
    if (tr->count("--lr")) tc.learning_rate = t.lr;
    if (tr->count("--weight-decay")) tc.weight_decay = t.wd;
    if (tr->count("--jitter-sigma")) tc.jitter_sigma_deg = t.jitter;
    tc.seed = t.seed;
    mc.time_origin_epoch_s = t0;
    mc.bank_path = t.bank;

    pa::AttributionModel model(in.catalog.vocab, mc);
    model.init(t.seed);
    const pa::SpatialGridIndex index(in.catalog);

    std::ofstream metrics;
    std::ostream* metrics_out = nullptr;
    if (!t.metrics.empty()) {
      metrics.open(t.metrics);
      if (!metrics)
        throw pa::Error(pa::ErrorKind::io, "cannot open '" + t.metrics + "' for writing");
      metrics_out = &metrics;
    }
    const auto history =
        pa::train(model, &bank, in.trajectories, in.catalog, index, tc, metrics_out);
    model.save_checkpoint(t.out);
    if (!history.empty()) {
      const auto& last = history.back();
      std::fprintf(stderr, "epoch %d: loss %.4f, top-1 %.4f (skipped %zu) -> %s\n",
                   last.epoch, last.mean_loss, last.train_top1, last.skipped,
                   t.out.c_str());
    }
  });

  // ---- attribute ----
  auto* at = app.add_subcommand("attribute", "rank candidate POIs for every stay");
  struct {
    std::string pois, stays, checkpoint, bank, out;
    std::size_t top_k = 5;
    int threads = 1;
    bool kde_off = false, prior_off = false, mean_categories = false;
  } a;
  at->add_option("--pois", a.pois, "POI catalog CSV")->required();
  at->add_option("--stays", a.stays, "stays CSV")->required();
  at->add_option("--checkpoint", a.checkpoint, "trained checkpoint (.pfmr)")->required();
  at->add_option("--bank", a.bank, "density bank (.pkde)");
  at->add_option("--out", a.out, "attribution CSV path")->required();
  at->add_option("--top-k", a.top_k, "ranks to emit per stay");
  at->add_option("--threads", a.threads, "attribution fan-out threads");
  at->add_flag("--kde-off", a.kde_off, "drop the crowd-likelihood term");
  at->add_flag("--prior-off", a.prior_off, "drop the learned-prior term");
  at->add_flag("--mean-categories", a.mean_categories, "average terms over categories");
  at->callback([&] {
    auto in = load_inputs(a.pois, a.stays);
    pa::AttributionModel model =
        pa::AttributionModel::load_checkpoint(a.checkpoint, in.catalog.vocab);
    if (a.kde_off) model.config().kde_term = false;
    if (a.prior_off) model.config().prior_term = false;
    if (a.mean_categories) model.config().mean_categories = true;
    pa::normalize_timestamps(in.trajectories, model.config().time_origin_epoch_s);

    std::optional<pa::KdeBank> bank;
    if (model.config().kde_term) {
      if (a.bank.empty())
        throw pa::Error(pa::ErrorKind::validation,
                        "--bank is required unless --kde-off is given");
      bank = pa::load_bank(a.bank, &in.catalog.vocab);
    }
    const pa::SpatialGridIndex index(in.catalog);
    pa::AttributeOptions opts;
    opts.top_k = a.top_k;
    opts.threads = a.threads;
    const auto results = pa::attribute_with_model(
        model, bank ? &*bank : nullptr, in.trajectories, in.catalog, index, opts);
    pa::write_attribution_csv(results, a.out);
    std::fprintf(stderr, "attributed %zu stays -> %s\n", results.size(), a.out.c_str());
  });

  // ---- evaluate ----
  auto* ev = app.add_subcommand("evaluate", "top-k accuracy under noise conditions");
  struct {
    std::string pois, stays, checkpoint, bank, out, attributions;
    std::vector<std::string> sigma_specs;
    std::uint64_t seed = 0;
    std::size_t top_k = 5;
    int threads = 1;
    double baseline_threshold = 0;
    bool baseline = false, no_model = false, table = true;
    bool kde_off = false, prior_off = false, mean_categories = false;
  } e;
  ev->add_option("--pois", e.pois, "POI catalog CSV")->required();
  ev->add_option("--stays", e.stays, "labeled test stays CSV")->required();
  ev->add_option("--checkpoint", e.checkpoint, "trained checkpoint (.pfmr)");
  ev->add_option("--bank", e.bank, "density bank (.pkde)");
  ev->add_option("--out", e.out, "report JSON path")->required();
  ev->add_option("--seed", e.seed, "rng seed (noise draws)")->required();
  ev->add_option("--noise-sigma", e.sigma_specs,
                 "comma-separated sigma set (deg); repeat for more conditions");
  ev->add_option("--top-k", e.top_k, "ranks per stay");
  ev->add_option("--threads", e.threads, "attribution fan-out threads");
  ev->add_flag("--baseline", e.baseline, "also run the nearest-centroid baseline");
  ev->add_flag("--no-model", e.no_model, "baseline only, skip the model");
  ev->add_option("--baseline-threshold-m", e.baseline_threshold,
                 "baseline distance threshold (default: candidate radius)");
  ev->add_flag("--kde-off", e.kde_off, "drop the crowd-likelihood term");
  ev->add_flag("--prior-off", e.prior_off, "drop the learned-prior term");
  ev->add_flag("--mean-categories", e.mean_categories, "average terms over categories");
  ev->add_flag("--table,!--no-table", e.table, "print the metric table");
  ev->callback([&] {
    auto in = load_inputs(e.pois, e.stays);
    std::optional<pa::AttributionModel> model;
    std::optional<pa::KdeBank> bank;
    double baseline_threshold = 200.0;
    if (!e.no_model) {
      if (e.checkpoint.empty())
        throw pa::Error(pa::ErrorKind::validation,
                        "--checkpoint is required unless --no-model is given");
      model.emplace(
          pa::AttributionModel::load_checkpoint(e.checkpoint, in.catalog.vocab));
      if (e.kde_off) model->config().kde_term = false;
      if (e.prior_off) model->config().prior_term = false;
      if (e.mean_categories) model->config().mean_categories = true;
      pa::normalize_timestamps(in.trajectories, model->config().time_origin_epoch_s);
      if (model->config().kde_term) {
        if (e.bank.empty())
          throw pa::Error(pa::ErrorKind::validation,
                          "--bank is required unless --kde-off is given");
        bank = pa::load_bank(e.bank, &in.catalog.vocab);
      }
      baseline_threshold = model->config().candidate_radius_m;
    }
    if (ev->count("--baseline-threshold-m")) baseline_threshold = e.baseline_threshold;

    std::vector<pa::MethodSpec> methods;
    if (model) {
      std::string label = "model";
      if (!model->config().kde_term) label += "_kde_off";
      if (!model->config().prior_term) label += "_prior_off";
      methods.push_back({label, &*model, bank ? &*bank : nullptr, baseline_threshold});
    }
    if (e.baseline || e.no_model)
      methods.push_back({"closest_centroid", nullptr, nullptr, baseline_threshold});

    std::vector<pa::NoiseCondition> conditions;
    if (e.sigma_specs.empty()) {
      conditions.push_back({"clean", {}});
    } else {
      for (const auto& spec : e.sigma_specs)
        conditions.push_back({spec, parse_sigma_list(spec)});
    }

    const pa::SpatialGridIndex index(in.catalog);
    pa::AttributeOptions opts;
    opts.top_k = std::max<std::size_t>(e.top_k, 5);
    opts.threads = e.threads;
    nlohmann::json echo{{"pois", e.pois},
                        {"stays", e.stays},
                        {"checkpoint", e.checkpoint},
                        {"bank", e.bank},
                        {"top_k", e.top_k},
                        {"baseline_threshold_m", baseline_threshold}};
    const pa::EvalReport report = pa::run_experiment(
        methods, conditions, in.trajectories, in.catalog, index, e.seed, opts, echo);
    write_json_file(report, e.out);
    if (e.table) std::fputs(pa::format_report_table(report).c_str(), stdout);
  });

  // ---- baseline ----
  auto* bl = app.add_subcommand("baseline", "nearest-centroid attribution");
  struct {
    std::string pois, stays, out;
    double threshold = 200.0;
    std::size_t top_k = 5;
    int threads = 1;
  } b;
  bl->add_option("--pois", b.pois, "POI catalog CSV")->required();
  bl->add_option("--stays", b.stays, "stays CSV")->required();
  bl->add_option("--out", b.out, "attribution CSV path")->required();
  bl->add_option("--threshold-m", b.threshold, "distance threshold (m)");
  bl->add_option("--top-k", b.top_k, "ranks to emit per stay");
  bl->add_option("--threads", b.threads, "fan-out threads");
  bl->callback([&] {
    auto in = load_inputs(b.pois, b.stays);
    const pa::SpatialGridIndex index(in.catalog);
    pa::AttributeOptions opts;
    opts.top_k = b.top_k;
    opts.threads = b.threads;
    const auto results =
        pa::attribute_with_baseline(in.trajectories, in.catalog, index, b.threshold, opts);
    pa::write_attribution_csv(results, b.out);
    std::fprintf(stderr, "attributed %zu stays -> %s\n", results.size(), b.out.c_str());
  });

  // ---- gradcheck ----
  auto* gc = app.add_subcommand("gradcheck",
                                "finite-difference check of the full backward pass");
  struct {
    std::string pois, stays, bank;
    std::uint64_t seed = 0;
    double step = 1e-3, sample_fraction = 0.01, fail_above = 0;
    std::size_t min_per_group = 20;
  } gk;
  ModelFlags gmf;
  gc->add_option("--pois", gk.pois, "POI catalog CSV")->required();
  gc->add_option("--stays", gk.stays, "small labeled stays CSV")->required();
  gc->add_option("--bank", gk.bank, "density bank (.pkde)")->required();
  gc->add_option("--seed", gk.seed, "rng seed (init + sampling)")->required();
  gc->add_option("--step", gk.step, "finite-difference step");
  gc->add_option("--sample-fraction", gk.sample_fraction, "fraction of parameters checked");
  gc->add_option("--min-per-group", gk.min_per_group, "checked parameters per group");
  gc->add_option("--fail-above", gk.fail_above, "exit 1 when max rel err exceeds this");
  gmf.add_to(gc);
  gc->callback([&] {
    auto in = load_inputs(gk.pois, gk.stays);
    pa::normalize_timestamps(in.trajectories, std::nullopt);
    const pa::KdeBank bank = pa::load_bank(gk.bank, &in.catalog.vocab);
    pa::ModelConfig mc;
    gmf.apply(gc, mc);
    mc.dropout = 0.0;
    pa::AttributionModel model(in.catalog.vocab, mc);
    model.init(gk.seed);
    const pa::SpatialGridIndex index(in.catalog);

    pa::GradCheckOptions opts;
    opts.step = gk.step;
    opts.sample_fraction = gk.sample_fraction;
    opts.min_per_group = gk.min_per_group;
    opts.seed = gk.seed;
    const pa::GradCheckReport report =
        pa::gradient_check(model, &bank, in.trajectories, in.catalog, index, opts);
    std::printf("checked %zu parameters in %.2fs\n", report.n_checked, report.elapsed_s);
    for (const auto& [group, err] : report.group_max)
      std::printf("  %-14s max rel err %.3e\n", group.c_str(), err);
    std::printf("max rel err %.3e (%s; analytic %.6e vs numeric %.6e)\n",
                report.max_rel_err, report.worst_tensor.c_str(), report.worst_analytic,
                report.worst_numeric);
    if (gc->count("--fail-above") && report.max_rel_err > gk.fail_above)
      throw pa::Error(pa::ErrorKind::validation, "gradient check exceeded threshold");
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& h) {
    return app.exit(h);
  } catch (const CLI::CallForVersion& v) {
    return app.exit(v);
  } catch (const CLI::ParseError& pe) {
    std::cerr << "error: " << pe.what() << "\n\n" << app.help() << std::flush;
    return 1;
  } catch (const pa::Error& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return error_exit_code(err);
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return 1;
  }
  return 0;
}
