#pragma once

#include <cstdint>
#include <vector>

namespace cascade {

/// Bagged linear classifiers over standardized features; the committee score
/// is the mean signed margin of the members.
struct CommitteeModel {
  std::vector<double> feature_mean;
  std::vector<double> feature_scale;
  std::vector<std::vector<double>> weights;  // one weight vector per member
  std::vector<double> bias;                  // one per member

  int feature_count() const { return static_cast<int>(feature_mean.size()); }
  int members() const { return static_cast<int>(bias.size()); }
};

struct CommitteeTrainConfig {
  int members = 5;
  int epochs = 200;
  double learning_rate = 0.05;
  double l2 = 1e-3;
  std::uint64_t seed = 0;
};

/// Trains each member by full-batch subgradient descent on L2-regularized
/// hinge loss, over a seeded bootstrap resample of the training set.
/// labels: 1 = positive, 0 = negative; both classes must be present.
CommitteeModel train_committee(const std::vector<std::vector<double>>& features,
                               const std::vector<int>& labels, const CommitteeTrainConfig& config);

double committee_score(const CommitteeModel& model, const std::vector<double>& features);

}  // namespace cascade
