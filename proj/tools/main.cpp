// Command-line pipeline: data generation, training, conformal calibration,
// evaluation, and recursive-estimation rollouts, all reproducible from a
// config file plus overrides. Every output artifact carries the hash of
// the effective configuration.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "piattnp/config.hpp"
#include "piattnp/cp/conformal.hpp"
#include "piattnp/data/dataset.hpp"
#include "piattnp/errors.hpp"
#include "piattnp/est/estimator.hpp"
#include "piattnp/est/ukf.hpp"
#include "piattnp/eval/metrics.hpp"
#include "piattnp/model/pi_attnp.hpp"
#include "piattnp/model/train.hpp"
#include "piattnp/rng.hpp"

namespace fs = std::filesystem;
using namespace piattnp;

namespace {

using Matrix = Eigen::MatrixXd;

struct CliArgs {
  std::string config_path;
  std::string out_dir = "out";
  long long seed = -1;  // -1: keep config/file value
  bool no_prior = false;
  std::string cp_mode;  // empty: keep config value
  std::vector<std::string> overrides;
};

Config build_config(const CliArgs& args) {
  Config cfg;
  if (!args.config_path.empty()) cfg = Config::from_file(args.config_path);
  for (const std::string& kv : args.overrides) cfg.apply_override(kv);
  if (args.seed >= 0) cfg.set("seed", std::to_string(args.seed));
  if (args.no_prior) cfg.set("use_prior", "false");
  if (!args.cp_mode.empty()) cfg.set("cp_mode", args.cp_mode);
  return cfg;
}

uint64_t config_seed(const Config& cfg) { return static_cast<uint64_t>(cfg.get_int("seed", 42)); }

std::string data_dir(const Config& cfg, const std::string& out) {
  return cfg.get_string("data_dir", out + "/data");
}

std::string model_path(const Config& cfg, const std::string& out) {
  const bool prior = cfg.get_bool("use_prior", true);
  return cfg.get_string("model_path", out + (prior ? "/model.ckpt" : "/model_noprior.ckpt"));
}

void write_text(const std::string& path, const std::string& body) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw MissingArtifact("cannot open " + path + " for writing");
  f << body;
}

std::string csv_row(const std::vector<double>& vals) {
  std::string row;
  for (size_t i = 0; i < vals.size(); ++i) {
    if (i) row += ",";
    row += format_double(vals[i]);
  }
  return row;
}

data::MetaDataset load_data_with_split(const Config& cfg, const std::string& out,
                                       data::SplitIndices& split) {
  return data::load_dataset(data_dir(cfg, out), &split);
}

model::PiAttNP load_model(const Config& cfg, const std::string& out) {
  return model::PiAttNP::from_checkpoint(nn::load_checkpoint(model_path(cfg, out)));
}

// ---------------------------------------------------------------- gen-data

int cmd_gen_data(const Config& cfg, const std::string& out) {
  const data::GenParams gp = data::GenParams::from_config(cfg);
  const sim::QuadrotorParams qp = sim::QuadrotorParams::from_config(cfg);
  const sim::NoiseGenConfig nc = sim::NoiseGenConfig::from_config(cfg);
  const uint64_t seed = config_seed(cfg);

  data::MetaDataset meta = data::generate_meta_dataset(gp, qp, nc, seed);
  const double train_frac = cfg.get_double("train_frac", 0.8);
  const int cal_size = cfg.get_int("cal_size", 1000);
  const data::SplitIndices split = data::split(meta, train_frac, cal_size, seed);

  nlohmann::json echo;
  echo["config_hash"] = cfg.hash();
  echo["keys"] = cfg.values();
  meta.generation_config = echo;

  const std::string dir = data_dir(cfg, out);
  fs::create_directories(dir);
  data::save_dataset(meta, dir, &split);

  std::cout << "gen-data: " << meta.size() << " records (" << meta.n_tasks << " x "
            << meta.steps_per_task << "), rejected " << meta.trajectories_rejected
            << " trajectories, split " << split.train.size() << "/" << split.test.size() << "/"
            << split.cal.size() << " -> " << dir << "\n";
  return 0;
}

// ------------------------------------------------------------------- train

int cmd_train(const Config& cfg, const std::string& out) {
  data::SplitIndices split;
  const data::MetaDataset meta = load_data_with_split(cfg, out, split);
  const sim::QuadrotorParams qp = sim::QuadrotorParams::from_config(cfg);
  const model::ModelHyper hyper = model::ModelHyper::from_config(cfg);
  model::TrainConfig tc = model::TrainConfig::from_config(cfg);
  tc.seed = config_seed(cfg);

  model::PiAttNP m(hyper, tc.seed);
  const model::PriorTable priors = model::compute_priors(meta, qp, hyper.use_prior);
  const model::TrainResult res = model::train_model(m, meta, split, priors.y_prior, tc);

  nn::CheckpointData ckpt = m.to_checkpoint();
  ckpt.meta["config_hash"] = cfg.hash();
  ckpt.meta["best_epoch"] = std::to_string(res.best_epoch);
  nn::save_checkpoint(model_path(cfg, out), ckpt);

  std::string csv = "# config_hash=" + cfg.hash() + "\n";
  csv += "epoch,train_elbo,test_elbo,test_rmse,test_nll\n";
  for (const model::EpochStats& row : res.curves) {
    csv += std::to_string(row.epoch) + "," +
           csv_row({row.train_elbo, row.test_elbo, row.test_rmse, row.test_nll}) + "\n";
  }
  const std::string curve_name = hyper.use_prior ? "/loss_curves.csv" : "/loss_curves_noprior.csv";
  write_text(out + curve_name, csv);

  nlohmann::json summary;
  summary["config_hash"] = cfg.hash();
  summary["best_epoch"] = res.best_epoch;
  summary["best_test_elbo"] = format_double(res.best_test_elbo);
  summary["param_count"] = m.param_count();
  summary["gimbal_prior_fallbacks"] = priors.gimbal_fallbacks;
  summary["use_prior"] = hyper.use_prior;
  write_text(out + (hyper.use_prior ? "/train_summary.json" : "/train_summary_noprior.json"),
             summary.dump(2) + "\n");

  std::cout << "train: " << res.curves.size() << " epochs, best epoch " << res.best_epoch
            << ", best test elbo " << format_double(res.best_test_elbo) << ", params "
            << m.param_count() << " -> " << model_path(cfg, out) << "\n";
  return 0;
}

// --------------------------------------------------------------- calibrate

cp::QuantileVector compute_quantiles(const Config& cfg, const std::string& out,
                                     model::PiAttNP& m, const data::MetaDataset& meta,
                                     const data::SplitIndices& split, const Matrix& priors,
                                     cp::Mode mode) {
  const double alpha = cfg.get_double("cp_alpha", 0.05);
  const int chunk = cfg.get_int("batch_size", 1000);
  std::mt19937_64 rng = make_rng(derive_seed(config_seed(cfg), 0xCA1));
  (void)out;
  return cp::calibrate(m, meta, split.cal, priors, alpha, mode, chunk, rng);
}

nlohmann::json quantile_to_json(const cp::QuantileVector& q, const std::string& hash) {
  nlohmann::json j;
  j["config_hash"] = hash;
  j["mode"] = cp::mode_name(q.mode);
  j["alpha"] = format_double(q.alpha);
  j["cal_size"] = q.cal_size;
  std::vector<std::string> qs;
  for (int i = 0; i < 12; ++i) qs.push_back(format_double(q.q(i)));
  j["q"] = qs;
  j["q_joint"] = format_double(q.q_joint);
  return j;
}

cp::QuantileVector quantile_from_json(const nlohmann::json& j) {
  cp::QuantileVector q;
  q.mode = cp::mode_from_name(j.at("mode").get<std::string>());
  q.alpha = std::stod(j.at("alpha").get<std::string>());
  q.cal_size = j.at("cal_size").get<int>();
  const auto qs = j.at("q").get<std::vector<std::string>>();
  for (int i = 0; i < 12; ++i) q.q(i) = std::stod(qs.at(static_cast<size_t>(i)));
  q.q_joint = std::stod(j.at("q_joint").get<std::string>());
  return q;
}

int cmd_calibrate(const Config& cfg, const std::string& out) {
  data::SplitIndices split;
  data::MetaDataset meta = load_data_with_split(cfg, out, split);
  const sim::QuadrotorParams qp = sim::QuadrotorParams::from_config(cfg);
  model::PiAttNP m = load_model(cfg, out);
  const model::PriorTable priors = model::compute_priors(meta, qp, m.hyper.use_prior);
  const cp::Mode mode = cp::mode_from_name(cfg.get_string("cp_mode", "marginal"));

  const cp::QuantileVector q = compute_quantiles(cfg, out, m, meta, split, priors.y_prior, mode);

  // Coverage audit on the held-out test records.
  const int chunk = cfg.get_int("batch_size", 1000);
  std::mt19937_64 rng_test = make_rng(derive_seed(config_seed(cfg), 0xE7E5));
  const model::Prediction pred =
      model::predict_records(m, meta, split.test, priors.y_prior, chunk, rng_test);
  Matrix y_test(static_cast<long>(split.test.size()), 12);
  for (size_t i = 0; i < split.test.size(); ++i)
    y_test.row(static_cast<long>(i)) = meta.records[static_cast<size_t>(split.test[i])].y_T.transpose();
  const cp::CoverageStats cov = cp::audit_coverage(y_test, pred.mu, pred.sigma2, q);
  const auto band = cp::coverage_band(q.alpha, q.cal_size);

  const std::string tag = cp::mode_name(mode);
  write_text(out + "/quantiles_" + tag + ".json", quantile_to_json(q, cfg.hash()).dump(2) + "\n");

  std::string csv = "# config_hash=" + cfg.hash() + "\n";
  csv += "dimension,q_alpha,coverage_empirical,band_low,band_high\n";
  for (int j = 0; j < 12; ++j) {
    csv += std::to_string(j) + "," +
           csv_row({q.for_dim(j), cov.per_dim(j), band.first, band.second}) + "\n";
  }
  csv += "mean," + csv_row({q.mode == cp::Mode::Joint ? q.q_joint : q.q.mean(), cov.mean,
                            band.first, band.second}) + "\n";
  write_text(out + "/calibration_" + tag + ".csv", csv);

  std::cout << "calibrate[" << tag << "]: N=" << q.cal_size << " alpha=" << format_double(q.alpha)
            << " mean coverage=" << format_double(cov.mean) << " band=["
            << format_double(band.first) << "," << format_double(band.second) << "]\n";
  return 0;
}

// ---------------------------------------------------------------- evaluate

int cmd_evaluate(const Config& cfg, const std::string& out) {
  data::SplitIndices split;
  data::MetaDataset meta = load_data_with_split(cfg, out, split);
  const sim::QuadrotorParams qp = sim::QuadrotorParams::from_config(cfg);
  model::PiAttNP m = load_model(cfg, out);
  const model::PriorTable priors = model::compute_priors(meta, qp, m.hyper.use_prior);
  const int chunk = cfg.get_int("batch_size", 1000);

  std::mt19937_64 rng_test = make_rng(derive_seed(config_seed(cfg), 0xE7E5));
  const model::Prediction pred =
      model::predict_records(m, meta, split.test, priors.y_prior, chunk, rng_test);
  Matrix y_test(static_cast<long>(split.test.size()), 12);
  for (size_t i = 0; i < split.test.size(); ++i)
    y_test.row(static_cast<long>(i)) = meta.records[static_cast<size_t>(split.test[i])].y_T.transpose();

  const eval::BatchedMetric rmse_m = eval::rmse_batched(y_test, pred.mu, chunk);
  const eval::BatchedMetric nll_m = eval::nll_batched(y_test, pred.mu, pred.sigma2, chunk);
  const std::array<double, 4> groups = eval::group_rmse(y_test, pred.mu);

  std::string csv = "# config_hash=" + cfg.hash() + "\n";
  csv += "metric,value,stddev_over_batches\n";
  csv += "rmse," + csv_row({rmse_m.mean, rmse_m.stddev}) + "\n";
  csv += "nll," + csv_row({nll_m.mean, nll_m.stddev}) + "\n";
  const char* group_names[4] = {"rmse_velocity", "rmse_acceleration", "rmse_rates",
                                "rmse_rate_derivatives"};
  for (int g = 0; g < 4; ++g)
    csv += std::string(group_names[g]) + "," + csv_row({groups[static_cast<size_t>(g)], 0.0}) + "\n";
  write_text(out + "/eval_metrics.csv", csv);

  // Coverage for all three modes, quantiles recomputed from the
  // calibration split with the same stream the calibrate command uses.
  std::string cov_csv = "# config_hash=" + cfg.hash() + "\n";
  cov_csv += "mode,q_norm,mean_coverage,band_low,band_high\n";
  std::string md_cov;
  for (cp::Mode mode : {cp::Mode::Marginal, cp::Mode::Joint, cp::Mode::Off}) {
    const cp::QuantileVector q = compute_quantiles(cfg, out, m, meta, split, priors.y_prior, mode);
    const cp::CoverageStats cov = cp::audit_coverage(y_test, pred.mu, pred.sigma2, q);
    const auto band = cp::coverage_band(q.alpha, q.cal_size);
    const double q_norm = mode == cp::Mode::Joint ? q.q_joint
                          : mode == cp::Mode::Off ? 1.0
                                                  : q.q.norm();
    cov_csv += cp::mode_name(mode) + "," +
               csv_row({q_norm, cov.mean, band.first, band.second}) + "\n";
    md_cov += "| " + cp::mode_name(mode) + " | " + format_double(q_norm) + " | " +
              format_double(cov.mean) + " | [" + format_double(band.first) + ", " +
              format_double(band.second) + "] |\n";
  }
  write_text(out + "/eval_coverage.csv", cov_csv);

  std::string md = "# Evaluation report\n\nconfig_hash: `" + cfg.hash() + "`\n\n";
  md += "Error bars are standard deviations across evaluation minibatches of size " +
        std::to_string(chunk) + ".\n\n";
  md += "## One-step prediction metrics (held-out records: " +
        std::to_string(split.test.size()) + ")\n\n";
  md += "| metric | value | std over batches |\n|---|---|---|\n";
  md += "| RMSE | " + format_double(rmse_m.mean) + " | " + format_double(rmse_m.stddev) + " |\n";
  md += "| NLL | " + format_double(nll_m.mean) + " | " + format_double(nll_m.stddev) + " |\n\n";
  md += "## Per-block RMSE\n\n| block | RMSE |\n|---|---|\n";
  for (int g = 0; g < 4; ++g)
    md += "| " + std::string(group_names[g]) + " | " + format_double(groups[static_cast<size_t>(g)]) +
          " |\n";
  md += "\n## Conformal coverage on held-out records\n\n";
  md += "| mode | quantile norm | mean coverage | theorem band |\n|---|---|---|---|\n" + md_cov;
  write_text(out + "/eval_report.md", md);

  std::cout << "evaluate: rmse=" << format_double(rmse_m.mean)
            << " nll=" << format_double(nll_m.mean) << " on " << split.test.size()
            << " held-out records\n";
  return 0;
}

// ----------------------------------------------------------------- rollout

std::string rollout_csv(const std::vector<est::RolloutRow>& rows, const std::string& hash) {
  std::string csv = "# config_hash=" + hash + "\n";
  csv += "step,t";
  for (int i = 0; i < 12; ++i) csv += ",y_true_" + std::to_string(i);
  for (int i = 0; i < 12; ++i) csv += ",y_plus_" + std::to_string(i);
  for (int i = 0; i < 12; ++i) csv += ",sigma_plus_" + std::to_string(i);
  for (int i = 0; i < 6; ++i) csv += ",y_obs_" + std::to_string(i);
  csv += "\n";
  for (const est::RolloutRow& r : rows) {
    std::vector<double> vals;
    vals.push_back(r.t);
    for (int i = 0; i < 12; ++i) vals.push_back(r.y_true(i));
    for (int i = 0; i < 12; ++i) vals.push_back(r.y_plus(i));
    for (int i = 0; i < 12; ++i) vals.push_back(r.sigma_plus(i));
    for (int i = 0; i < 6; ++i) vals.push_back(r.y_obs(i));
    csv += std::to_string(r.step) + "," + csv_row(vals) + "\n";
  }
  return csv;
}

double rollout_rmse(const std::vector<est::RolloutRow>& rows) {
  double total = 0.0;
  for (const est::RolloutRow& r : rows) total += (r.y_true - r.y_plus).squaredNorm();
  return std::sqrt(total / static_cast<double>(rows.size()));
}

int cmd_rollout(const Config& cfg, const std::string& out) {
  data::SplitIndices split;
  data::MetaDataset meta = load_data_with_split(cfg, out, split);
  const sim::QuadrotorParams qp = sim::QuadrotorParams::from_config(cfg);
  model::PiAttNP m = load_model(cfg, out);
  const cp::Mode mode = cp::mode_from_name(cfg.get_string("cp_mode", "marginal"));

  cp::QuantileVector q;
  if (mode == cp::Mode::Off) {
    q.mode = cp::Mode::Off;
    q.alpha = cfg.get_double("cp_alpha", 0.05);
    q.cal_size = static_cast<int>(split.cal.size());
  } else {
    const std::string qpath =
        cfg.get_string("quantile_path", out + "/quantiles_" + cp::mode_name(mode) + ".json");
    std::ifstream f(qpath);
    if (!f) throw MissingArtifact("quantile report not found at " + qpath + "; run calibrate first");
    nlohmann::json j;
    f >> j;
    q = quantile_from_json(j);
  }

  const int traj_start = cfg.get_int("rollout_traj_start", 0);
  const int traj_count = cfg.get_int("rollout_traj_count", 5);
  if (traj_start < 0 || traj_start + traj_count > meta.n_tasks)
    throw ConfigError("rollout trajectory range exceeds dataset (n_tasks = " +
                      std::to_string(meta.n_tasks) + ")");

  const est::UkfConfig ukf_cfg = est::UkfConfig::quadrotor_default();
  nlohmann::json summary;
  summary["config_hash"] = cfg.hash();
  summary["cp_mode"] = cp::mode_name(mode);
  nlohmann::json per_traj = nlohmann::json::array();

  for (int k = 0; k < traj_count; ++k) {
    const int traj = traj_start + k;
    std::mt19937_64 rng = make_rng(derive_seed(config_seed(cfg), 0x0117 + static_cast<uint64_t>(traj)));
    const std::vector<est::RolloutRow> est_rows = est::run_trajectory(m, q, qp, meta, traj, rng);
    const std::vector<est::RolloutRow> ukf_rows = est::run_ukf_trajectory(qp, ukf_cfg, meta, traj);

    char tag[16];
    std::snprintf(tag, sizeof(tag), "%03d", traj);
    write_text(out + "/rollout_piattnp_" + tag + ".csv", rollout_csv(est_rows, cfg.hash()));
    write_text(out + "/rollout_ukf_" + tag + ".csv", rollout_csv(ukf_rows, cfg.hash()));

    nlohmann::json row;
    row["traj"] = traj;
    row["model_rmse"] = format_double(rollout_rmse(est_rows));
    row["ukf_rmse"] = format_double(rollout_rmse(ukf_rows));
    per_traj.push_back(row);
  }
  summary["trajectories"] = per_traj;
  write_text(out + "/rollout_summary.json", summary.dump(2) + "\n");

  std::cout << "rollout: " << traj_count << " trajectories starting at " << traj_start << " -> "
            << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"physics-informed attentive neural process state-estimation pipeline"};
  app.require_subcommand(1);
  app.fallthrough();

  CliArgs args;
  app.add_option("--config", args.config_path, "key=value config file");
  app.add_option("--seed", args.seed, "master seed (overrides config)");
  app.add_option("--out", args.out_dir, "output directory");
  app.add_flag("--no-prior", args.no_prior, "train/evaluate the plain AttNP ablation");
  app.add_option("--cp-mode", args.cp_mode, "conformal mode: marginal|joint|off")
      ->check(CLI::IsMember({"marginal", "joint", "off"}));
  app.add_option("--set", args.overrides, "config override key=value (repeatable)");

  CLI::App* sc_gen = app.add_subcommand("gen-data", "simulate trajectories into a meta dataset");
  CLI::App* sc_train = app.add_subcommand("train", "train the model on a generated dataset");
  CLI::App* sc_cal = app.add_subcommand("calibrate", "compute conformal quantiles");
  CLI::App* sc_eval = app.add_subcommand("evaluate", "metrics and coverage on held-out records");
  CLI::App* sc_roll = app.add_subcommand("rollout", "recursive estimation along trajectories");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    const Config cfg = build_config(args);
    fs::create_directories(args.out_dir);
    if (sc_gen->parsed()) return cmd_gen_data(cfg, args.out_dir);
    if (sc_train->parsed()) return cmd_train(cfg, args.out_dir);
    if (sc_cal->parsed()) return cmd_calibrate(cfg, args.out_dir);
    if (sc_eval->parsed()) return cmd_evaluate(cfg, args.out_dir);
    if (sc_roll->parsed()) return cmd_rollout(cfg, args.out_dir);
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const MissingArtifact& e) {
    std::cerr << "missing artifact: " << e.what() << "\n";
    return 3;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
