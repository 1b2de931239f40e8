#include "cascade/committee.hpp"

#include <cmath>
#include <cstddef>

#include "cascade/errors.hpp"
#include "cascade/rng.hpp"

namespace cascade {

CommitteeModel train_committee(const std::vector<std::vector<double>>& features,
                               const std::vector<int>& labels, const CommitteeTrainConfig& config) {
  if (features.empty()) throw ValidationError("train_committee: empty training set");
  if (features.size() != labels.size()) throw ValidationError("train_committee: features/labels size mismatch");
  if (config.members < 1) throw ValidationError("train_committee: members must be >= 1");
  if (config.epochs < 1) throw ValidationError("train_committee: epochs must be >= 1");
  if (config.learning_rate <= 0) throw ValidationError("train_committee: learning rate must be positive");
  if (config.l2 < 0) throw ValidationError("train_committee: negative l2 penalty");

  const std::size_t n = features.size();
  const std::size_t dim = features.front().size();
  if (dim == 0) throw ValidationError("train_committee: zero-dimensional features");
  bool has_pos = false, has_neg = false;
  for (std::size_t i = 0; i < n; ++i) {
    if (features[i].size() != dim) throw ValidationError("train_committee: ragged feature rows");
    for (const double x : features[i])
      if (!std::isfinite(x)) throw NonFiniteError("train_committee: non-finite feature");
    if (labels[i] != 0 && labels[i] != 1) throw ValidationError("train_committee: labels must be 0 or 1");
    (labels[i] == 1 ? has_pos : has_neg) = true;
  }
  if (!has_pos || !has_neg) throw ValidationError("train_committee: training set has a single class");

  CommitteeModel model;
  model.feature_mean.assign(dim, 0.0);
  model.feature_scale.assign(dim, 1.0);
  for (std::size_t c = 0; c < dim; ++c) {
    double sum = 0.0;
    for (const auto& row : features) sum += row[c];
    const double mean = sum / static_cast<double>(n);
    double var = 0.0;
    for (const auto& row : features) var += (row[c] - mean) * (row[c] - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    model.feature_mean[c] = mean;
    model.feature_scale[c] = sd > 0 ? sd : 1.0;
  }

  std::vector<std::vector<double>> z(n, std::vector<double>(dim));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < dim; ++c)
      z[i][c] = (features[i][c] - model.feature_mean[c]) / model.feature_scale[c];

  for (int m = 0; m < config.members; ++m) {
    Rng rng(derive_seed(config.seed, "committee-member", static_cast<std::uint64_t>(m)));
    std::vector<std::size_t> sample(n);
    bool sample_pos = false, sample_neg = false;
    for (std::size_t i = 0; i < n; ++i) {
      sample[i] = rng.below(n);
      (labels[sample[i]] == 1 ? sample_pos : sample_neg) = true;
    }
    // A bootstrap draw can miss a class; patch with the first example of it
    // so every member sees both.
    if (!sample_pos || !sample_neg) {
      const int missing = sample_pos ? 0 : 1;
      for (std::size_t i = 0; i < n; ++i)
        if (labels[i] == missing) {
          sample[0] = i;
          break;
        }
    }

    std::vector<double> w(dim, 0.0);
    double b = 0.0;
    std::vector<double> grad(dim);
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      for (std::size_t c = 0; c < dim; ++c) grad[c] = config.l2 * w[c];
      double grad_b = 0.0;
      const double inv = 1.0 / static_cast<double>(n);
      for (const std::size_t i : sample) {
        const double y = labels[i] == 1 ? 1.0 : -1.0;
        double margin = b;
        for (std::size_t c = 0; c < dim; ++c) margin += w[c] * z[i][c];
        if (y * margin < 1.0) {
          for (std::size_t c = 0; c < dim; ++c) grad[c] -= inv * y * z[i][c];
          grad_b -= inv * y;
        }
      }
      for (std::size_t c = 0; c < dim; ++c) w[c] -= config.learning_rate * grad[c];
      b -= config.learning_rate * grad_b;
    }
    for (const double x : w)
      if (!std::isfinite(x)) throw NonFiniteError("train_committee: diverged weights");
    if (!std::isfinite(b)) throw NonFiniteError("train_committee: diverged bias");
    model.weights.push_back(std::move(w));
    model.bias.push_back(b);
  }
  return model;
}

double committee_score(const CommitteeModel& model, const std::vector<double>& features) {
  if (model.members() < 1) throw ValidationError("committee_score: empty model");
  if (static_cast<int>(features.size()) != model.feature_count())
    throw ValidationError("committee_score: feature count mismatch");
  double total = 0.0;
  for (int m = 0; m < model.members(); ++m) {
    double margin = model.bias[m];
    for (int c = 0; c < model.feature_count(); ++c)
      margin += model.weights[m][c] * (features[c] - model.feature_mean[c]) / model.feature_scale[c];
    total += margin;
  }
  return total / model.members();
}

}  // namespace cascade
