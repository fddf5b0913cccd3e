// msat: synthetic data generation, training, evaluation, ablation and
// prediction for the multi-scale attention segmentation model.
//
// Exit codes: 0 success, 1 usage/configuration error, 2 numerical failure.

#include "msat/checkpoint.hpp"
#include "msat/config.hpp"
#include "msat/pnm.hpp"
#include "msat/synth.hpp"
#include "msat/train.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace msat;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitNumerical = 2;

struct CommonFlags {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "flat key = value config file");
  cmd->add_option("--set", flags.sets, "override a config key (key=value), repeatable");
  cmd->add_option("--seed", flags.seed, "random seed");
  cmd->add_option("--out", flags.out, "output directory");
}

RunConfig resolve(const CommonFlags& flags) {
  RunConfig cfg;
  if (!flags.config_path.empty()) cfg = parse_config(read_file(flags.config_path), cfg);
  for (const auto& kv : flags.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    apply_setting(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (flags.seed) cfg.seed = *flags.seed;
  if (!flags.out.empty()) cfg.out_dir = flags.out;
  return cfg;
}

fs::path checkpoint_path(const RunConfig& cfg) {
  return cfg.checkpoint.empty() ? cfg.out_dir / "model.msat" : cfg.checkpoint;
}

int cmd_gen_data(const CommonFlags& flags) {
  RunConfig cfg = resolve(flags);
  if (flags.seed) cfg.synth.seed = *flags.seed;
  const fs::path dir = flags.out.empty() ? cfg.data_dir : fs::path(flags.out);
  write_dataset(cfg.synth, cfg.data_count, dir);
  std::cout << "wrote " << cfg.data_count << " samples (" << cfg.synth.height << "x" << cfg.synth.width << ", "
            << cfg.synth.n_class << " classes) to " << dir << "\n";
  return 0;
}

int cmd_train(const CommonFlags& flags, bool quiet) {
  const RunConfig cfg = resolve(flags);
  const Dataset data = load_dataset(cfg.data_dir);
  const long every = std::max<long>(1, cfg.max_iter / 20);
  const auto result = train(cfg, data, [&](const LogRow& row) {
    if (!quiet && (row.iter % every == 0 || row.iter + 1 == cfg.max_iter)) {
      std::printf("iter %6ld  lr %.6f  loss %.5f\n", row.iter, row.lr, row.loss_total);
      std::fflush(stdout);
    }
  });
  std::cout << "saved " << (cfg.out_dir / "model.msat") << " after " << result.state.iteration << " iterations\n";
  return 0;
}

int cmd_eval(const CommonFlags& flags, const std::string& split) {
  const RunConfig cfg = resolve(flags);
  if (split != "val" && split != "train") throw ConfigError("--split must be val or train");
  const Dataset data = load_dataset(cfg.data_dir);
  const auto params = model_tensors(load_checkpoint(checkpoint_path(cfg)));
  const auto report = evaluate(cfg.model, params, data, split == "train", cfg.batch_size);
  const std::string table = format_table(report);
  std::cout << table;
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    write_file(cfg.out_dir / ("metrics_" + split + ".txt"), table);
    write_file(cfg.out_dir / ("metrics_" + split + ".kv"), format_key_values(report));
  }
  return 0;
}

int cmd_ablate(const CommonFlags& flags) {
  const RunConfig cfg = resolve(flags);
  const Dataset data = load_dataset(cfg.data_dir);
  const auto rows = ablate(cfg, data, [](const std::string& line) {
    std::cout << line << std::endl;
  });
  const std::string table = format_ablation_table(rows);
  std::cout << table;
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    write_file(cfg.out_dir / "ablation.txt", table);
  }
  return 0;
}

int cmd_predict(const CommonFlags& flags, const std::string& image_path) {
  const RunConfig cfg = resolve(flags);
  const auto params = model_tensors(load_checkpoint(checkpoint_path(cfg)));
  const TensorF image = read_ppm(read_file(image_path));
  const auto prediction = predict(cfg.model, params, image);
  const fs::path dir = cfg.out_dir / "prediction";
  write_prediction(prediction, dir);
  std::cout << "wrote mask, colorized image and " << prediction.attention.size() << " attention / "
            << prediction.recalibration.size() << " recalibration maps to " << dir << "\n";
  return 0;
}

int cmd_gradcheck(const CommonFlags& flags, std::size_t samples, double tolerance, bool single) {
  RunConfig cfg = resolve(flags);
  if (flags.sets.empty() && flags.config_path.empty()) cfg.synth.height = cfg.synth.width = 32;
  const double eps = 1e-5;  // differences are always taken in 64-bit
  const auto report = single ? gradcheck_model<float>(cfg.model, cfg.synth, 2, samples, eps, cfg.seed)
                             : gradcheck_model<double>(cfg.model, cfg.synth, 2, samples, eps, cfg.seed);
  std::printf("gradcheck (%s, h=%g): %zu coordinates, max relative error %.3e at %s[%lld] "
              "(analytic %.6e, numeric %.6e)\n",
              single ? "32-bit" : "64-bit", eps, report.samples, report.max_rel_err, report.worst_param.c_str(),
              static_cast<long long>(report.worst_index), report.worst_analytic, report.worst_numeric);
  if (report.max_rel_err >= tolerance) {
    std::printf("FAIL: exceeds tolerance %g\n", tolerance);
    return kExitNumerical;
  }
  std::printf("PASS (tolerance %g)\n", tolerance);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-scale attention fusion for semantic segmentation"};
  app.require_subcommand(1);

  CommonFlags gen_flags, train_flags, eval_flags, ablate_flags, predict_flags, grad_flags;
  auto* gen = app.add_subcommand("gen-data", "write the synthetic dataset");
  add_common(gen, gen_flags);

  auto* tr = app.add_subcommand("train", "train with the poly learning-rate schedule");
  add_common(tr, train_flags);
  bool quiet = false;
  tr->add_flag("--quiet", quiet, "suppress progress lines");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the dataset");
  add_common(ev, eval_flags);
  std::string split = "val";
  ev->add_option("--split", split, "val or train");

  auto* ab = app.add_subcommand("ablate", "train and compare the ablation rows");
  add_common(ab, ablate_flags);

  auto* pr = app.add_subcommand("predict", "predict a mask and attention maps for one PPM image");
  add_common(pr, predict_flags);
  std::string image_path;
  pr->add_option("image", image_path, "input image (binary PPM)")->required();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the full model loss");
  add_common(gc, grad_flags);
  std::size_t samples = 50;
  double tolerance = 1e-4;
  bool single = false;
  gc->add_option("--samples", samples, "parameter coordinates to probe");
  gc->add_option("--tolerance", tolerance, "maximum relative error");
  gc->add_flag("--float", single, "run in 32-bit instead of 64-bit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_flags);
    if (tr->parsed()) return cmd_train(train_flags, quiet);
    if (ev->parsed()) return cmd_eval(eval_flags, split);
    if (ab->parsed()) return cmd_ablate(ablate_flags);
    if (pr->parsed()) return cmd_predict(predict_flags, image_path);
    if (gc->parsed()) return cmd_gradcheck(grad_flags, samples, tolerance, single);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
