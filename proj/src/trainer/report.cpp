#include <iomanip>
#include <ostream>

#include "davit/trainer.hpp"
#include "json.hpp"

namespace davit {

namespace {

nlohmann::json optional_list(const std::vector<std::optional<double>>& v) {
  auto arr = nlohmann::json::array();
  for (const auto& x : v) arr.push_back(x ? nlohmann::json(*x) : nlohmann::json(nullptr));
  return arr;
}

}  // namespace

std::string epoch_json(const EpochRecord& r) {
  nlohmann::json j{{"type", "epoch"},  {"epoch", r.epoch}, {"iterations", r.iterations}, {"loss", r.loss},
                   {"pa", r.pa},       {"miou", r.miou},   {"seconds", r.seconds}};
  if (r.eval_pa) j["eval_pa"] = *r.eval_pa;
  if (r.eval_miou) j["eval_miou"] = *r.eval_miou;
  return j.dump();
}

std::string metrics_json(const Metrics& m) {
  auto rows = nlohmann::json::array();
  for (int i = 0; i < m.confusion.classes; ++i) {
    auto row = nlohmann::json::array();
    for (int j = 0; j < m.confusion.classes; ++j) row.push_back(m.confusion.at(i, j));
    rows.push_back(row);
  }
  nlohmann::json j{{"type", "metrics"},
                   {"pa", m.pa},
                   {"miou", m.miou},
                   {"per_class_iou", optional_list(m.per_class_iou)},
                   {"confusion", rows}};
  return j.dump();
}

void write_history_jsonl(std::ostream& os, const RunHistory& history) {
  for (const auto& e : history.epochs) os << epoch_json(e) << '\n';
}

void write_confusion_table(std::ostream& os, const ConfusionMatrix& cm) {
  const auto norm = cm.row_normalized();
  auto label = [&](int i) { return i < kNumClasses && cm.classes == kNumClasses ? class_name(i) : "class" + std::to_string(i); };
  const auto flags = os.flags();
  os << std::left << std::setw(12) << "true\\pred";
  for (int j = 0; j < cm.classes; ++j) os << std::setw(12) << label(j);
  os << '\n';
  for (int i = 0; i < cm.classes; ++i) {
    os << std::setw(12) << label(i);
    for (int j = 0; j < cm.classes; ++j) {
      os << std::setw(12) << std::fixed << std::setprecision(4) << norm[static_cast<size_t>(i * cm.classes + j)];
    }
    os << '\n';
  }
  os.flags(flags);
}

}  // namespace davit
