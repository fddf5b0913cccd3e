#ifndef MSAT_TRAIN_HPP
#define MSAT_TRAIN_HPP

#include "msat/config.hpp"
#include "msat/gradcheck.hpp"
#include "msat/labels.hpp"
#include "msat/metrics.hpp"
#include "msat/model.hpp"
#include "msat/synth.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace msat {

/// Raised when training meets a non-finite value (CLI exit code 2).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// base_lr * (1 - iter/max_iter)^power. iter beyond max_iter clamps to 0 and
/// warns on stderr.
double poly_lr(double base_lr, long iter, long max_iter, double power);

struct LogRow {
  long iter = 0;
  double lr = 0.0;  // encoder rate; the decoder runs at decoder_lr_mult times this
  double loss_total = 0.0;
  double loss_final = 0.0;
  std::vector<double> loss_streams;
};

std::string log_csv_header(std::size_t n_scales);
std::string format_log_row(const LogRow& row);

/// Parameters plus optimizer state; serialized in the MSAT container as the
/// model tensors, "state/momentum/<name>" and a one-element "state/iter".
struct TrainState {
  long iteration = 0;
  ParamMap<float> params;
  ParamMap<float> momentum;
};

ParamMap<float> encode_state(const TrainState& state);
TrainState decode_state(const ParamMap<float>& tensors);

/// Model tensors only (drops "state/..." entries).
ParamMap<float> model_tensors(const ParamMap<float>& tensors);

struct TrainResult {
  TrainState state;
  std::vector<LogRow> log;
};

/// Indices of the training samples used at `iter` (epoch-wise shuffles drawn
/// from a counter-based stream keyed by seed).
std::vector<std::uint64_t> batch_indices(const std::vector<std::uint64_t>& pool, long iter, long batch_size,
                                         std::uint64_t seed);

/// Batches N images (3 x H x W each) into N x 3 x H x W.
TensorF stack_images(const std::vector<const TensorF*>& images);

/// SGD with momentum under the poly schedule. Writes loss_log.csv, config.txt,
/// periodic ckpt_%06d.msat and final model.msat into cfg.out_dir unless it is
/// empty. Resumes from cfg.resume when set.
TrainResult train(const RunConfig& cfg, const Dataset& data,
                  const std::function<void(const LogRow&)>& on_step = {});

/// Scores one batch and returns per-pixel argmax at the /4 resolution.
LabelMap predict_labels(const ModelConfig& cfg, const ParamMap<float>& params, const TensorF& batch);

/// Metrics over the chosen split, at the /4 label resolution used for training.
MetricsReport evaluate(const ModelConfig& cfg, const ParamMap<float>& params, const Dataset& data,
                       bool train_split, long batch_size = 8);

struct Prediction {
  LabelMap mask;                          // argmax, nearest-upsampled to the input size
  TensorF colorized;                      // 3 x H x W
  std::vector<LabelMap> attention;        // softmax(wl) per scale, 8-bit
  std::vector<LabelMap> recalibration;    // wr per class, 8-bit
};

Prediction predict(const ModelConfig& cfg, const ParamMap<float>& params, const TensorF& image);

/// mask.pgm, colorized.ppm, attention_s<k>.pgm, recalib_c<c>.pgm.
void write_prediction(const Prediction& p, const std::filesystem::path& dir);

struct AblationRow {
  std::string name;
  Ablation flags;
  std::vector<double> miou;  // one per seed
  double median = 0.0;
};

/// The comparison rows: attention-to-scale base, +multi-stage,
/// +diverse dilations, full method, max-pool merge, avg-pool merge.
std::vector<AblationRow> ablation_rows(const Ablation& base);

/// Trains every row for every seed on the same dataset and reports val mIoU.
std::vector<AblationRow> ablate(const RunConfig& base, const Dataset& data,
                                const std::function<void(const std::string&)>& progress = {});

std::string format_ablation_table(const std::vector<AblationRow>& rows);

double median(std::vector<double> xs);

/// End-to-end finite-difference check of the 1+S loss for `cfg` on `batch`
/// generated samples. Instantiated for float and double.
template <typename Scalar>
GradCheckReport gradcheck_model(const ModelConfig& cfg, const SynthSpec& data_spec, long batch,
                                std::size_t samples, double epsilon, std::uint64_t seed);

}  // namespace msat

#endif  // MSAT_TRAIN_HPP
