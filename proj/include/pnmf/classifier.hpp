#pragma once

#include <array>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pnmf/dataset.hpp"
#include "pnmf/featstats.hpp"
#include "pnmf/neuralkit.hpp"

namespace pnmf::classifier {

enum class Architecture { Conv, Dense };

struct ClassifierConfig {
  Architecture architecture = Architecture::Conv;
  nn::TrainConfig train{};  // defaults: Adam 1e-3, batch 32, 60 epochs
};

struct ClassifierBundle {
  nn::NetModel net;
  std::vector<std::size_t> selected_indices;
  std::array<std::string, 2> class_names{"normal", "tumor"};
  double threshold = 0.5;
};

/// conv1d(1->8, k3) -> relu -> flatten -> dense(8(M-2) -> 32) -> relu -> dense(32 -> 2) -> softmax,
/// or with Architecture::Dense: dense(M -> 32) -> relu -> dense(32 -> 2) -> softmax.
nn::NetModel build_default(std::size_t M, const nn::TrainConfig& config = {},
                           Architecture arch = Architecture::Conv);

/// Accuracy of the argmax/threshold decision on selected features (M x N).
double accuracy(const nn::Network& net, const DenseMatrix& X_selected, std::span<const int> labels);

/// Trains with cross-entropy on the selected training features, keeping the
/// epoch with the best validation accuracy.
std::pair<ClassifierBundle, nn::TrainLog> train_classifier(const FeatureSet& X_train,
                                                           const FeatureSet& X_val,
                                                           const featstats::SelectionResult& selection,
                                                           const ClassifierConfig& config);

/// Probabilities (N x 2, columns normal/tumor) for selected features given as M x N.
DenseMatrix predict_proba(const ClassifierBundle& bundle, const DenseMatrix& X_selected);

/// Tumor-probability threshold decision per row of a probability matrix.
std::vector<int> predict_labels(const DenseMatrix& probs, double threshold = 0.5);

struct Confusion {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::size_t tn = 0;

  std::size_t total() const noexcept { return tp + fp + fn + tn; }
};

Confusion confusion(std::span<const int> labels, std::span<const int> predictions);

/// One-hot targets (N x 2) for labels.
DenseMatrix one_hot(std::span<const int> labels);

}  // namespace pnmf::classifier
