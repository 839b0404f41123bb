#include "pnmf/classifier.hpp"

#include "pnmf/error.hpp"

namespace pnmf::classifier {

nn::NetModel build_default(std::size_t M, const nn::TrainConfig& config, Architecture arch) {
  using nn::LayerSpec;
  if (arch == Architecture::Dense) {
    if (M < 1) fail(ErrorCode::BadConfig, "M must be >= 1");
    return nn::make_model({LayerSpec::dense(M, 32), LayerSpec::relu(32), LayerSpec::dense(32, 2),
                           LayerSpec::softmax(2)},
                          config);
  }
  if (M < 3) fail(ErrorCode::BadConfig, "M = " + std::to_string(M) + " is smaller than the conv kernel (3)");
  const std::size_t flat = 8 * (M - 2);
  return nn::make_model({LayerSpec::conv1d(1, M, 8, 3, 1), LayerSpec::relu(flat), LayerSpec::flatten(flat),
                         LayerSpec::dense(flat, 32), LayerSpec::relu(32), LayerSpec::dense(32, 2),
                         LayerSpec::softmax(2)},
                        config);
}

DenseMatrix one_hot(std::span<const int> labels) {
  DenseMatrix t(labels.size(), 2);
  for (std::size_t i = 0; i < labels.size(); ++i) t(i, labels[i] == 1 ? 1 : 0) = 1.0f;
  return t;
}

double accuracy(const nn::Network& net, const DenseMatrix& X_selected, std::span<const int> labels) {
  if (X_selected.cols() != labels.size()) fail(ErrorCode::ShapeError, "labels/columns mismatch");
  std::size_t correct = 0;
  for (std::size_t c = 0; c < X_selected.cols(); ++c) {
    const auto p = net.predict(X_selected.column(c));
    // Same float rounding as predict_proba so decisions agree exactly.
    const int pred = static_cast<float>(p[1]) >= 0.5f ? 1 : 0;
    if (pred == labels[c]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

std::pair<ClassifierBundle, nn::TrainLog> train_classifier(const FeatureSet& X_train, const FeatureSet& X_val,
                                                           const featstats::SelectionResult& selection,
                                                           const ClassifierConfig& config) {
  if (!X_train.normalized || !X_val.normalized) fail(ErrorCode::BadConfig, "features must be L2-normalized");
  const DenseMatrix train_sel = featstats::select_rows(X_train.X, selection.selected);
  const DenseMatrix val_sel = featstats::select_rows(X_val.X, selection.selected);
  const std::size_t M = selection.selected.size();

  nn::NetModel model = build_default(M, config.train, config.architecture);
  nn::TrainHooks hooks;
  hooks.train_metric = [&](const nn::Network& net) { return accuracy(net, train_sel, X_train.labels); };
  hooks.val_metric = [&](const nn::Network& net) { return accuracy(net, val_sel, X_val.labels); };
  hooks.higher_is_better = true;
  auto result = nn::train(std::move(model), train_sel.transposed(), one_hot(X_train.labels),
                          nn::Loss::CrossEntropy, config.train, hooks);
  ClassifierBundle bundle;
  bundle.net = std::move(result.model);
  bundle.selected_indices = selection.selected;
  return {std::move(bundle), std::move(result.log)};
}

DenseMatrix predict_proba(const ClassifierBundle& bundle, const DenseMatrix& X_selected) {
  if (X_selected.rows() != bundle.net.input_dim()) {
    fail(ErrorCode::ShapeError, "expected " + std::to_string(bundle.net.input_dim()) + " features, got " +
                                    std::to_string(X_selected.rows()));
  }
  const nn::Network net(bundle.net);
  DenseMatrix probs(X_selected.cols(), 2);
  for (std::size_t c = 0; c < X_selected.cols(); ++c) {
    const auto p = net.predict(X_selected.column(c));
    probs(c, 0) = static_cast<float>(p[0]);
    probs(c, 1) = static_cast<float>(p[1]);
  }
  return probs;
}

std::vector<int> predict_labels(const DenseMatrix& probs, double threshold) {
  std::vector<int> out(probs.rows());
  for (std::size_t i = 0; i < probs.rows(); ++i) out[i] = probs(i, 1) >= threshold ? 1 : 0;
  return out;
}

Confusion confusion(std::span<const int> labels, std::span<const int> predictions) {
  if (labels.size() != predictions.size()) fail(ErrorCode::ShapeError, "labels and predictions differ in length");
  Confusion c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool pos = labels[i] == 1;
    const bool pred = predictions[i] == 1;
    if (pos && pred) ++c.tp;
    else if (pos) ++c.fn;
    else if (pred) ++c.fp;
    else ++c.tn;
  }
  return c;
}

}  // namespace pnmf::classifier
