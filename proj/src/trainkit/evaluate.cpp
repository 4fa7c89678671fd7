#include "bfr/errors.hpp"
#include "bfr/ops.hpp"
#include "bfr/trainkit.hpp"

#include <cstdio>
#include <numeric>

namespace bfr {

std::string MetricsReport::to_csv() const {
  std::string out = "id,psnr,ssim,id_cos\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f\n", r.id.c_str(), r.psnr, r.ssim, r.id_cos);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "mean,%.6f,%.6f,%.6f\n", mean_psnr, mean_ssim, mean_id_cos);
  out += buf;
  std::snprintf(buf, sizeof buf, "feature_frechet,%.6f,,\n", feature_frechet);
  out += buf;
  return out;
}

MetricsReport score(const Tensor<float>& outputs, const Tensor<float>& targets, const std::vector<std::string>& ids,
                    LossNets<float>& nets) {
  if (outputs.shape() != targets.shape() || outputs.ndim() != 4) {
    throw DimensionError("score: outputs " + to_string(outputs.shape()) + " and targets " + to_string(targets.shape()));
  }
  const Index n = outputs.dim(0);
  if (static_cast<Index>(ids.size()) != n) throw ContractError("score: one id per image required");
  NoGradGuard guard;
  const auto ea = nets.identity.embed(outputs), eb = nets.identity.embed(targets);
  const Index d = ea.dim(1);
  MetricsReport report;
  for (Index i = 0; i < n; ++i) {
    MetricsRow row;
    row.id = ids[static_cast<std::size_t>(i)];
    const auto a = slice(outputs, 0, i, 1), b = slice(targets, 0, i, 1);
    row.psnr = psnr(a, b);
    row.ssim = ssim(a, b);
    row.id_cos = (ea.values().segment(i * d, d).cast<double>() * eb.values().segment(i * d, d).cast<double>()).sum();
    report.rows.push_back(row);
  }
  auto mean_of = [&](double MetricsRow::*field) {
    double total = 0;
    for (const auto& r : report.rows) total += r.*field;
    return n ? total / static_cast<double>(n) : 0.0;
  };
  report.mean_psnr = mean_of(&MetricsRow::psnr);
  report.mean_ssim = mean_of(&MetricsRow::ssim);
  report.mean_id_cos = mean_of(&MetricsRow::id_cos);
  report.feature_frechet = feature_frechet(outputs, targets, nets.perceptual);
  return report;
}

MetricsReport evaluate(TrainState& state, const Dataset& data) {
  if (!data.has_lq()) throw ContractError("evaluate: dataset has no lq images");
  std::vector<Index> all(static_cast<std::size_t>(data.size()));
  std::iota(all.begin(), all.end(), 0);
  std::vector<std::string> ids;
  for (const auto& r : data.records) ids.push_back(r.id);
  const auto outputs = restore(state.generator, stack_images(data, all, true));
  return score(outputs, stack_images(data, all, false), ids, state.nets);
}

}  // namespace bfr
