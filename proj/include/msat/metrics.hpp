#ifndef MSAT_METRICS_HPP
#define MSAT_METRICS_HPP

#include "msat/labels.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace msat {

class MetricsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// counts(g, p) = number of pixels with ground truth g predicted as p.
/// Ignore-labelled ground-truth pixels are skipped.
class ConfusionMatrix {
 public:
  using Counts = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>;

  explicit ConfusionMatrix(int n_class);

  void accumulate(const LabelMap& pred, const LabelMap& gt);
  void merge(const ConfusionMatrix& other);

  int n_class() const { return static_cast<int>(counts_.rows()); }
  std::int64_t operator()(int gt, int pred) const { return counts_(gt, pred); }
  std::int64_t total() const { return counts_.sum(); }
  const Counts& counts() const { return counts_; }

  bool operator==(const ConfusionMatrix& other) const { return counts_ == other.counts_; }

 private:
  Counts counts_;
};

ConfusionMatrix& accumulate_confusion(const LabelMap& pred, const LabelMap& gt,
                                      ConfusionMatrix& cm);

/// IoU per class; nullopt for classes absent from both ground truth and prediction.
std::vector<std::optional<double>> per_class_iou(const ConfusionMatrix& cm);

/// Mean IoU over classes present in ground truth or prediction.
double miou(const ConfusionMatrix& cm);

double pixel_accuracy(const ConfusionMatrix& cm);

struct MetricsReport {
  double miou = 0.0;
  double pixel_accuracy = 0.0;
  std::vector<std::optional<double>> class_iou;
  std::int64_t pixels = 0;
};

MetricsReport make_report(const ConfusionMatrix& cm);

/// Human-readable table.
std::string format_table(const MetricsReport& report);

/// One `key=value` per line: miou, pixel_accuracy, pixels, iou_<c>.
std::string format_key_values(const MetricsReport& report);

}  // namespace msat

#endif  // MSAT_METRICS_HPP
