#include "msat/metrics.hpp"

#include <cstdio>
#include <sstream>

namespace msat {

ConfusionMatrix::ConfusionMatrix(int n_class) {
  if (n_class < 1) throw MetricsError("confusion matrix needs at least one class");
  counts_ = Counts::Zero(n_class, n_class);
}

void ConfusionMatrix::accumulate(const LabelMap& pred, const LabelMap& gt) {
  if (pred.n != gt.n || pred.h != gt.h || pred.w != gt.w) {
    throw ShapeError("confusion: prediction " + to_string({pred.n, pred.h, pred.w}) +
                     " and ground truth " + to_string({gt.n, gt.h, gt.w}) + " differ in shape");
  }
  const int k = n_class();
  // Validate first so a bad map leaves the counts untouched.
  for (std::size_t i = 0; i < gt.data.size(); ++i) {
    const int g = gt.data[i];
    if (g == kIgnoreLabel) continue;
    const int p = pred.data[i];
    if (g >= k || p >= k) {
      throw MetricsError("confusion: label " + std::to_string(g >= k ? g : p) +
                         " outside class range " + std::to_string(k));
    }
  }
  for (std::size_t i = 0; i < gt.data.size(); ++i) {
    if (gt.data[i] != kIgnoreLabel) ++counts_(gt.data[i], pred.data[i]);
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_class() != n_class()) throw MetricsError("confusion: class count mismatch in merge");
  counts_ += other.counts_;
}

ConfusionMatrix& accumulate_confusion(const LabelMap& pred, const LabelMap& gt,
                                      ConfusionMatrix& cm) {
  cm.accumulate(pred, gt);
  return cm;
}

std::vector<std::optional<double>> per_class_iou(const ConfusionMatrix& cm) {
  const auto& c = cm.counts();
  std::vector<std::optional<double>> out(static_cast<std::size_t>(cm.n_class()));
  for (int k = 0; k < cm.n_class(); ++k) {
    const std::int64_t inter = c(k, k);
    const std::int64_t uni = c.row(k).sum() + c.col(k).sum() - inter;
    if (uni > 0) out[static_cast<std::size_t>(k)] = static_cast<double>(inter) / static_cast<double>(uni);
  }
  return out;
}

double miou(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw MetricsError("mIoU of an empty confusion matrix");
  double acc = 0.0;
  int present = 0;
  for (const auto& iou : per_class_iou(cm)) {
    if (!iou) continue;
    acc += *iou;
    ++present;
  }
  return acc / present;
}

double pixel_accuracy(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw MetricsError("pixel accuracy of an empty confusion matrix");
  return static_cast<double>(cm.counts().trace()) / static_cast<double>(cm.total());
}

MetricsReport make_report(const ConfusionMatrix& cm) {
  return MetricsReport{miou(cm), pixel_accuracy(cm), per_class_iou(cm), cm.total()};
}

std::string format_table(const MetricsReport& report) {
  std::ostringstream os;
  char buf[96];
  os << "class    IoU\n";
  for (std::size_t c = 0; c < report.class_iou.size(); ++c) {
    if (report.class_iou[c]) {
      std::snprintf(buf, sizeof buf, "%-8zu %.4f\n", c, *report.class_iou[c]);
    } else {
      std::snprintf(buf, sizeof buf, "%-8zu n/a\n", c);
    }
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "mIoU     %.4f\npixacc   %.4f\npixels   %lld\n", report.miou,
                report.pixel_accuracy, static_cast<long long>(report.pixels));
  os << buf;
  return os.str();
}

std::string format_key_values(const MetricsReport& report) {
  std::ostringstream os;
  char buf[96];
  std::snprintf(buf, sizeof buf, "miou=%.9g\npixel_accuracy=%.9g\npixels=%lld\n", report.miou,
                report.pixel_accuracy, static_cast<long long>(report.pixels));
  os << buf;
  for (std::size_t c = 0; c < report.class_iou.size(); ++c) {
    if (report.class_iou[c]) {
      std::snprintf(buf, sizeof buf, "iou_%zu=%.9g\n", c, *report.class_iou[c]);
    } else {
      std::snprintf(buf, sizeof buf, "iou_%zu=nan\n", c);
    }
    os << buf;
  }
  return os.str();
}

}  // namespace msat
