// Copyright 2026 The malnas Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "malnas/ffnn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "malnas/error.hpp"
#include "malnas/metrics.hpp"

namespace malnas {

std::string_view to_string(CountLoss kind) {
  switch (kind) {
    case CountLoss::mse_log1p: return "mse_log1p";
    case CountLoss::poisson: return "poisson";
  }
  return "?";
}

CountLoss parse_count_loss(std::string_view name) {
  if (name == "mse_log1p" || name == "mse") return CountLoss::mse_log1p;
  if (name == "poisson") return CountLoss::poisson;
  throw ConfigError("unknown count loss '" + std::string(name) + "'");
}

Tensor DenseLayer::forward(const Tensor& x) const { return add_bias(matmul(x, weight), bias); }

namespace {

DenseLayer make_dense(std::size_t in, std::size_t out, Rng& rng) {
  return {init_uniform_fan_in({in, out}, in, rng), init_uniform_fan_in({out}, in, rng)};
}

void check_arch(const ArchitectureConfig& arch, std::size_t input_dim, std::size_t n_tags) {
  if (input_dim == 0) throw SpecError("FFNN input_dim must be at least 1");
  if (arch.depth < 1) throw SpecError("FFNN depth must be at least 1");
  if (arch.width < 1) throw SpecError("FFNN width must be at least 1");
  if (arch.use_tags) {
    if (n_tags == 0) throw SpecError("a tag head needs at least one tag");
    if (arch.tag_head_depth < 1 || arch.tag_head_width < 1) throw SpecError("tag head depth and width must be positive");
  }
}

void append(ParameterList& out, const std::string& name, const DenseLayer& layer) {
  out.push_back({name + ".weight", layer.weight});
  out.push_back({name + ".bias", layer.bias});
}

Tensor gather_rows(std::span<const double> src, std::size_t width, std::span<const std::size_t> rows) {
  std::vector<double> out(rows.size() * width);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(rows[i] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  return Tensor::from({rows.size(), width}, std::move(out));
}

struct CountTransform {
  CountLoss kind = CountLoss::mse_log1p;
  double scale = 1.0;  // log1p of the training maximum

  double operator()(double count) const {
    return kind == CountLoss::mse_log1p ? std::log1p(count) / scale : count;
  }
};

HeadTargets targets_for(const TabularDataset& data, std::span<const std::size_t> rows, bool tags, bool counts,
                        const CountTransform& transform) {
  HeadTargets t;
  std::vector<double> y(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) y[i] = data.labels[rows[i]];
  t.malicious = Tensor::from({rows.size(), 1}, std::move(y));
  if (tags) t.tags = gather_rows(data.tags, data.n_tags(), rows);
  if (counts) {
    std::vector<double> c(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) c[i] = transform(data.vendor_counts[rows[i]]);
    t.count = Tensor::from({rows.size(), 1}, std::move(c));
  }
  return t;
}

}  // namespace

FfnnModel::FfnnModel(const ArchitectureConfig& arch, std::size_t input_dim, std::size_t n_tags, Rng& rng)
    : arch_(arch), input_dim_(input_dim), n_tags_(arch.use_tags ? n_tags : 0) {
  check_arch(arch, input_dim, n_tags);
  const auto w = static_cast<std::size_t>(arch.width);
  trunk_.push_back(make_dense(input_dim, w, rng));
  for (int i = 0; i < arch.depth; ++i) trunk_.push_back(make_dense(w, w, rng));
  malicious_head_ = make_dense(w, 1, rng);
  if (arch.use_tags) {
    const auto tw = static_cast<std::size_t>(arch.tag_head_width);
    for (int i = 0; i < arch.tag_head_depth; ++i) tag_hidden_.push_back(make_dense(i == 0 ? w : tw, tw, rng));
    tag_out_ = make_dense(tw, n_tags, rng);
  }
  if (arch.use_counts) count_head_ = make_dense(w, 1, rng);
}

FfnnOutput FfnnModel::forward(const Tensor& x, Mode mode, double rate, Rng& rng) const {
  if (x.rank() != 2 || x.dim(1) != input_dim_) {
    throw DimensionError("FFNN expects [n, " + std::to_string(input_dim_) + "] input, got " + shape_string(x.shape()));
  }
  Tensor h = x;
  for (const auto& layer : trunk_) h = dropout(activation(layer.forward(h), arch_.activation), rate, mode, rng);
  FfnnOutput out;
  out.malicious = sigmoid(malicious_head_.forward(h));
  if (arch_.use_tags) {
    Tensor t = h;
    for (const auto& layer : tag_hidden_) t = dropout(activation(layer.forward(t), arch_.tag_head_activation), rate, mode, rng);
    out.tags = sigmoid(tag_out_.forward(t));
  }
  if (arch_.use_counts) out.count = count_head_.forward(h);
  return out;
}

ParameterList FfnnModel::parameters() const {
  ParameterList out;
  for (std::size_t i = 0; i < trunk_.size(); ++i) append(out, "trunk." + std::to_string(i), trunk_[i]);
  append(out, "head.malicious", malicious_head_);
  for (std::size_t i = 0; i < tag_hidden_.size(); ++i) append(out, "head.tags.hidden." + std::to_string(i), tag_hidden_[i]);
  if (arch_.use_tags) append(out, "head.tags.out", tag_out_);
  if (arch_.use_counts) append(out, "head.count", count_head_);
  return out;
}

FfnnModel build_ffnn(const ArchitectureConfig& arch, std::size_t input_dim, std::size_t n_tags, Rng& rng) {
  return FfnnModel(arch, input_dim, n_tags, rng);
}

std::size_t ffnn_parameter_count(const ArchitectureConfig& arch, std::size_t input_dim, std::size_t n_tags) {
  check_arch(arch, input_dim, n_tags);
  const auto w = static_cast<std::size_t>(arch.width);
  const auto d = static_cast<std::size_t>(arch.depth);
  std::size_t n = input_dim * w + w + d * (w * w + w) + (w + 1);
  if (arch.use_tags) {
    const auto tw = static_cast<std::size_t>(arch.tag_head_width);
    const auto td = static_cast<std::size_t>(arch.tag_head_depth);
    n += w * tw + tw + (td - 1) * (tw * tw + tw) + tw * n_tags + n_tags;
  }
  if (arch.use_counts) n += w + 1;
  return n;
}

Tensor multi_head_loss(const FfnnOutput& pred, const HeadTargets& targets, const LossWeights& weights,
                       CountLoss count_loss) {
  if (weights.tag > 0.0 && !pred.tags.defined()) throw UsageError("tag loss weight is positive but the model has no tag head");
  if (weights.count > 0.0 && !pred.count.defined()) {
    throw UsageError("count loss weight is positive but the model has no count head");
  }
  std::vector<Tensor> terms{scale(loss(LossKind::bce, pred.malicious, targets.malicious), weights.malicious)};
  if (weights.tag > 0.0) terms.push_back(scale(loss(LossKind::bce, pred.tags, targets.tags), weights.tag));
  if (weights.count > 0.0) {
    const LossKind kind = count_loss == CountLoss::poisson ? LossKind::poisson_log : LossKind::mse;
    terms.push_back(scale(loss(kind, pred.count, targets.count), weights.count));
  }
  return terms.size() == 1 ? terms[0] : add_n(terms);
}

LossWeights loss_weights_for(const ArchitectureConfig& arch, const HyperConfig& hyper) {
  return {1.0, arch.use_tags ? hyper.tag_loss_weight : 0.0, arch.use_counts ? hyper.count_loss_weight : 0.0};
}

std::vector<double> predict_malicious(const FfnnModel& model, const TabularDataset& data, std::size_t batch) {
  std::vector<double> out;
  out.reserve(data.size());
  Rng unused(0);
  std::vector<std::size_t> rows;
  for (std::size_t begin = 0; begin < data.size(); begin += batch) {
    const std::size_t end = std::min(data.size(), begin + batch);
    rows.resize(end - begin);
    std::iota(rows.begin(), rows.end(), begin);
    auto p = model.forward(gather_rows(data.features, data.input_dim, rows), Mode::eval, 0.0, unused).malicious;
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return out;
}

std::vector<EpochMetrics> train_epochs(FfnnModel& model, const TabularDataset& train, const TabularDataset& valid,
                                       const HyperConfig& hyper, const TrainOptions& options, Rng& rng,
                                       const EpochCallback& on_epoch) {
  if (train.size() == 0) throw DataError("training set is empty");
  if (valid.size() == 0) throw DataError("validation set is empty");
  if (train.input_dim != model.input_dim() || valid.input_dim != model.input_dim()) {
    throw DimensionError("dataset feature width does not match the model input");
  }
  if (hyper.batch_size < 1) throw ParameterError("batch size must be positive");
  const bool tags = model.has_tag_head();
  const bool counts = model.has_count_head();
  if (tags && (train.n_tags() != model.n_tags() || valid.n_tags() != model.n_tags())) {
    throw DataError("dataset tags do not match the model's tag head");
  }
  if (counts && (!train.has_counts || !valid.has_counts)) throw DataError("count head needs vendor counts");

  const LossWeights weights = loss_weights_for(model.arch(), hyper);
  CountTransform transform{options.count_loss, 1.0};
  if (counts) {
    const double max_count = *std::max_element(train.vendor_counts.begin(), train.vendor_counts.end());
    transform.scale = std::max(std::log1p(max_count), 1.0);
  }

  auto params_list = model.parameters();
  auto params = tensors_of(params_list);
  Adam adam({.lr = hyper.learning_rate});
  const std::size_t batch = std::min(static_cast<std::size_t>(hyper.batch_size), train.size());

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<std::size_t> valid_rows(valid.size());
  std::iota(valid_rows.begin(), valid_rows.end(), std::size_t{0});

  std::vector<EpochMetrics> history;
  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += batch) {
      const std::size_t end = std::min(order.size(), begin + batch);
      std::span<const std::size_t> rows(order.data() + begin, end - begin);
      auto x = gather_rows(train.features, train.input_dim, rows);
      auto pred = model.forward(x, Mode::train, hyper.dropout, rng);
      auto l = multi_head_loss(pred, targets_for(train, rows, tags, counts, transform), weights, options.count_loss);
      const double value = l.item();
      if (!std::isfinite(value)) throw NumericError("training loss became non-finite in epoch " + std::to_string(epoch));
      zero_grads(params);
      l.backward();
      adam.step(params);
      loss_sum += value * static_cast<double>(rows.size());
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / static_cast<double>(train.size());
    double val_loss = 0.0;
    std::vector<double> scores;
    scores.reserve(valid.size());
    for (std::size_t begin = 0; begin < valid.size(); begin += options.eval_batch) {
      const std::size_t end = std::min(valid.size(), begin + options.eval_batch);
      std::span<const std::size_t> rows(valid_rows.data() + begin, end - begin);
      auto pred = model.forward(gather_rows(valid.features, valid.input_dim, rows), Mode::eval, 0.0, rng);
      auto l = multi_head_loss(pred, targets_for(valid, rows, tags, counts, transform), weights, options.count_loss);
      val_loss += l.item() * static_cast<double>(rows.size());
      scores.insert(scores.end(), pred.malicious.data().begin(), pred.malicious.data().end());
    }
    m.val_loss = val_loss / static_cast<double>(valid.size());
    if (!std::isfinite(m.val_loss)) throw NumericError("validation loss became non-finite in epoch " + std::to_string(epoch));
    const auto basic = basic_metrics(confusion(scores, valid.labels, 0.5));
    m.val_f1 = basic.f1;
    m.val_accuracy = basic.accuracy;
    history.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return history;
}

nlohmann::json architecture_to_json(const ArchitectureConfig& arch) {
  return to_json(to_assignment(arch, sorel_architecture_space()));
}

ArchitectureConfig architecture_from_json(const nlohmann::json& j) {
  return architecture_from(assignment_from_json(j));
}

nlohmann::json hyper_to_json(const HyperConfig& hyper) {
  return {{"batch_size", hyper.batch_size},
          {"learning_rate", hyper.learning_rate},
          {"dropout", hyper.dropout},
          {"tag_loss_weight", hyper.tag_loss_weight},
          {"count_loss_weight", hyper.count_loss_weight}};
}

HyperConfig hyper_from_json(const nlohmann::json& j) { return hyper_from(assignment_from_json(j)); }

Checkpoint ffnn_checkpoint(const FfnnModel& model, const HyperConfig& hyper, const nlohmann::json& extra) {
  Checkpoint ck;
  ck.config = extra.is_object() ? extra : nlohmann::json::object();
  ck.config["model"] = "ffnn";
  ck.config["architecture"] = architecture_to_json(model.arch());
  ck.config["hyper"] = hyper_to_json(hyper);
  ck.config["input_dim"] = model.input_dim();
  ck.config["n_tags"] = model.n_tags();
  ck.arrays = capture(model.parameters());
  return ck;
}

FfnnModel ffnn_from_checkpoint(const Checkpoint& checkpoint) {
  const auto& c = checkpoint.config;
  if (c.value("model", "") != "ffnn") throw SchemaError("checkpoint does not hold an FFNN");
  Rng rng(0);
  FfnnModel model(architecture_from_json(c.at("architecture")), c.at("input_dim").get<std::size_t>(),
                  c.at("n_tags").get<std::size_t>(), rng);
  restore(model.parameters(), checkpoint.arrays);
  return model;
}

}  // namespace malnas
