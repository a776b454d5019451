#include <cmath>

#include "davit/trainer.hpp"

namespace davit {

int64_t ConfusionMatrix::total() const {
  int64_t t = 0;
  for (auto v : counts) t += v;
  return t;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes != classes) throw std::invalid_argument("cannot merge confusion matrices of different sizes");
  for (size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
}

std::vector<double> ConfusionMatrix::row_normalized() const {
  std::vector<double> out(counts.size(), 0.0);
  for (int i = 0; i < classes; ++i) {
    int64_t row = 0;
    for (int j = 0; j < classes; ++j) row += at(i, j);
    if (row == 0) continue;
    for (int j = 0; j < classes; ++j) {
      out[static_cast<size_t>(i * classes + j)] = static_cast<double>(at(i, j)) / static_cast<double>(row);
    }
  }
  return out;
}

void accumulate_confusion(ConfusionMatrix& cm, const IndexMap& pred, const IndexMap& gt, int ignore_index) {
  if (pred.n != gt.n || pred.h != gt.h || pred.w != gt.w) {
    throw ShapeError("prediction is " + std::to_string(pred.n) + "x" + std::to_string(pred.h) + "x" +
                     std::to_string(pred.w) + " but ground truth is " + std::to_string(gt.n) + "x" +
                     std::to_string(gt.h) + "x" + std::to_string(gt.w));
  }
  for (size_t i = 0; i < gt.values.size(); ++i) {
    const int t = gt.values[i];
    if (t == ignore_index) continue;
    const int p = pred.values[i];
    if (t < 0 || t >= cm.classes) throw std::invalid_argument("ground-truth class " + std::to_string(t) + " out of range");
    if (p < 0 || p >= cm.classes) throw std::invalid_argument("predicted class " + std::to_string(p) + " out of range");
    ++cm.at(t, p);
  }
}

ConfusionMatrix confusion_matrix(const IndexMap& pred, const IndexMap& gt, int classes, int ignore_index) {
  if (classes < 1) throw std::invalid_argument("confusion matrix needs at least one class");
  ConfusionMatrix cm(classes);
  accumulate_confusion(cm, pred, gt, ignore_index);
  return cm;
}

double pixel_accuracy(const ConfusionMatrix& cm) {
  const int64_t total = cm.total();
  if (total == 0) throw EmptyConfusionError("pixel accuracy of an empty confusion matrix is undefined");
  int64_t trace = 0;
  for (int i = 0; i < cm.classes; ++i) trace += cm.at(i, i);
  return static_cast<double>(trace) / static_cast<double>(total);
}

IouResult mean_iou(const ConfusionMatrix& cm, IouMode mode) {
  if (cm.total() == 0) throw EmptyConfusionError("mIoU of an empty confusion matrix is undefined");
  IouResult r;
  double sum = 0.0;
  int used = 0;
  for (int i = 0; i < cm.classes; ++i) {
    int64_t row = 0, col = 0;
    for (int j = 0; j < cm.classes; ++j) {
      row += cm.at(i, j);
      col += cm.at(j, i);
    }
    const int64_t uni = row + col - cm.at(i, i);
    if (uni == 0) {
      r.per_class.emplace_back(std::nullopt);
      continue;
    }
    const double iou = static_cast<double>(cm.at(i, i)) / static_cast<double>(uni);
    r.per_class.emplace_back(iou);
    sum += iou;
    ++used;
  }
  r.miou = sum / static_cast<double>(mode == IouMode::Strict ? cm.classes : used);
  return r;
}

Metrics Metrics::from_confusion(const ConfusionMatrix& cm, IouMode mode) {
  Metrics m;
  m.confusion = cm;
  m.pa = pixel_accuracy(cm);
  auto iou = mean_iou(cm, mode);
  m.miou = iou.miou;
  m.per_class_iou = std::move(iou.per_class);
  return m;
}

}  // namespace davit
