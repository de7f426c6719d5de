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

#include "malnas/darts.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "malnas/error.hpp"
#include "malnas/metrics.hpp"

namespace malnas {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Menu and topology
// ---------------------------------------------------------------------------

const std::array<OpKind, kOpCount>& op_menu() {
  static const std::array<OpKind, kOpCount> menu{OpKind::skip,         OpKind::dil_conv_3x3, OpKind::dil_conv_5x5,
                                                 OpKind::sep_conv_3x3, OpKind::sep_conv_5x5, OpKind::avg_pool_3x3,
                                                 OpKind::max_pool_3x3, OpKind::zero};
  return menu;
}

std::string_view to_string(OpKind op) {
  switch (op) {
    case OpKind::skip: return "skip";
    case OpKind::dil_conv_3x3: return "dil_conv_3x3";
    case OpKind::dil_conv_5x5: return "dil_conv_5x5";
    case OpKind::sep_conv_3x3: return "sep_conv_3x3";
    case OpKind::sep_conv_5x5: return "sep_conv_5x5";
    case OpKind::avg_pool_3x3: return "avg_pool_3x3";
    case OpKind::max_pool_3x3: return "max_pool_3x3";
    case OpKind::zero: return "zero";
  }
  return "?";
}

OpKind parse_op_kind(std::string_view name) {
  for (auto op : op_menu()) {
    if (to_string(op) == name) return op;
  }
  throw SpecError("unknown operation '" + std::string(name) + "'");
}

bool is_conv(OpKind op) {
  return op == OpKind::dil_conv_3x3 || op == OpKind::dil_conv_5x5 || op == OpKind::sep_conv_3x3 ||
         op == OpKind::sep_conv_5x5;
}

std::size_t edge_count(std::size_t nodes) { return 2 * nodes + nodes * (nodes - 1) / 2; }

std::size_t edge_index(std::size_t node, std::size_t input) {
  if (input >= node + 2) throw DimensionError("edge input index must be below node + 2");
  return 2 * node + node * (node - 1) / 2 + input;
}

std::vector<std::size_t> reduction_layers(std::size_t layers) {
  if (layers < 3) return {layers / 2};
  return {layers / 3, 2 * layers / 3};
}

// ---------------------------------------------------------------------------
// Genotypes
// ---------------------------------------------------------------------------

namespace {

void validate_cell(const CellGenotype& cell, const char* kind) {
  if (cell.nodes.empty()) throw SpecError(std::string(kind) + " cell has no nodes");
  for (std::size_t j = 0; j < cell.nodes.size(); ++j) {
    const auto& edges = cell.nodes[j];
    for (const auto& e : edges) {
      if (e.input >= j + 2) {
        throw SpecError(std::string(kind) + " node " + std::to_string(j) + " reads input " + std::to_string(e.input) +
                        ", which is not earlier in the cell");
      }
      if (e.op == OpKind::zero) throw SpecError(std::string(kind) + " node " + std::to_string(j) + " uses the zero op");
    }
    if (edges[0].input == edges[1].input) {
      throw SpecError(std::string(kind) + " node " + std::to_string(j) + " has two edges from the same input");
    }
  }
}

}  // namespace

void validate_genotype(const Genotype& genotype) {
  validate_cell(genotype.normal, "normal");
  validate_cell(genotype.reduction, "reduction");
  if (genotype.normal.nodes.size() != genotype.reduction.nodes.size()) {
    throw SpecError("normal and reduction cells must have the same node count");
  }
}

std::string genotype_to_text(const Genotype& genotype) {
  std::ostringstream out;
  for (auto [name, cell] : {std::pair{"normal", &genotype.normal}, std::pair{"reduction", &genotype.reduction}}) {
    out << "cell " << name << "\n";
    for (std::size_t j = 0; j < cell->nodes.size(); ++j) {
      out << "node " << j;
      for (const auto& e : cell->nodes[j]) out << " " << to_string(e.op) << " " << e.input;
      out << "\n";
    }
  }
  return out.str();
}

Genotype genotype_from_text(std::string_view text) {
  Genotype g;
  CellGenotype* current = nullptr;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    std::istringstream ls(line);
    std::string word;
    if (!(ls >> word)) continue;
    if (word == "cell") {
      std::string kind;
      ls >> kind;
      if (kind == "normal") {
        current = &g.normal;
      } else if (kind == "reduction") {
        current = &g.reduction;
      } else {
        throw ParseError("unknown cell kind '" + kind + "'", row);
      }
    } else if (word == "node") {
      if (!current) throw ParseError("node line before any cell line", row);
      std::size_t index = 0;
      std::string op0, op1;
      std::size_t in0 = 0, in1 = 0;
      if (!(ls >> index >> op0 >> in0 >> op1 >> in1)) throw ParseError("node line needs: index op input op input", row);
      if (index != current->nodes.size()) throw ParseError("node indices must be consecutive from 0", row);
      try {
        current->nodes.push_back({GenotypeEdge{parse_op_kind(op0), in0}, GenotypeEdge{parse_op_kind(op1), in1}});
      } catch (const SpecError& e) {
        throw ParseError(e.what(), row);
      }
    } else {
      throw ParseError("unexpected genotype line '" + line + "'", row);
    }
  }
  validate_genotype(g);
  return g;
}

// ---------------------------------------------------------------------------
// Alphas
// ---------------------------------------------------------------------------

AlphaParams init_alphas(std::size_t nodes, Rng& rng) {
  if (nodes == 0) throw SpecError("cells need at least one node");
  AlphaParams a;
  a.nodes = nodes;
  auto make = [&]() {
    std::vector<double> v(edge_count(nodes) * kOpCount);
    for (auto& x : v) x = 1e-3 * rng.normal();
    return Tensor::from({edge_count(nodes), kOpCount}, std::move(v), true);
  };
  a.normal = make();
  a.reduction = make();
  return a;
}

std::vector<double> alpha_weights(const Tensor& alpha) {
  const auto d = alpha.data();
  std::vector<double> w(d.size());
  const std::size_t cols = alpha.dim(1);
  for (std::size_t r = 0; r < alpha.dim(0); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, d[r * cols + c]);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += w[r * cols + c] = std::exp(d[r * cols + c] - mx);
    for (std::size_t c = 0; c < cols; ++c) w[r * cols + c] /= total;
  }
  return w;
}

CellGenotype derive_cell(const Tensor& alpha, std::size_t nodes) {
  if (alpha.rank() != 2 || alpha.dim(0) != edge_count(nodes) || alpha.dim(1) != kOpCount) {
    throw DimensionError("alpha matrix must be [edge_count(nodes), kOpCount]");
  }
  const auto w = alpha_weights(alpha);
  const auto zero = static_cast<std::size_t>(OpKind::zero);
  CellGenotype cell;
  for (std::size_t j = 0; j < nodes; ++j) {
    struct Candidate {
      std::size_t input;
      OpKind op;
      double strength;
    };
    std::vector<Candidate> cands;
    for (std::size_t i = 0; i < j + 2; ++i) {
      const std::size_t e = edge_index(j, i);
      std::size_t best = 0;
      for (std::size_t o = 1; o < kOpCount; ++o) {
        if (o != zero && w[e * kOpCount + o] > w[e * kOpCount + best]) best = o;
      }
      cands.push_back({i, op_menu()[best], w[e * kOpCount + best]});
    }
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Candidate& a, const Candidate& b) { return a.strength > b.strength; });
    std::array<GenotypeEdge, 2> kept{GenotypeEdge{cands[0].op, cands[0].input},
                                     GenotypeEdge{cands[1].op, cands[1].input}};
    if (kept[0].input > kept[1].input) std::swap(kept[0], kept[1]);
    cell.nodes.push_back(kept);
  }
  return cell;
}

Genotype derive_genotype(const AlphaParams& alphas) {
  return {derive_cell(alphas.normal, alphas.nodes), derive_cell(alphas.reduction, alphas.nodes)};
}

json to_json(const AlphaParams& alphas) {
  auto rows = [](const Tensor& t) {
    json out = json::array();
    for (std::size_t r = 0; r < t.dim(0); ++r) {
      json row = json::array();
      for (std::size_t c = 0; c < t.dim(1); ++c) row.push_back(t.at(r * t.dim(1) + c));
      out.push_back(row);
    }
    return out;
  };
  json ops = json::array();
  for (auto op : op_menu()) ops.push_back(to_string(op));
  return {{"nodes", alphas.nodes}, {"ops", ops}, {"normal", rows(alphas.normal)}, {"reduction", rows(alphas.reduction)}};
}

AlphaParams alphas_from_json(const json& j) {
  AlphaParams a;
  try {
    a.nodes = j.at("nodes").get<std::size_t>();
    auto read = [&](const json& rows) {
      if (rows.size() != edge_count(a.nodes)) throw SchemaError("alpha matrix has the wrong number of edges");
      std::vector<double> v;
      for (const auto& row : rows) {
        if (row.size() != kOpCount) throw SchemaError("alpha row has the wrong number of ops");
        for (const auto& x : row) v.push_back(x.get<double>());
      }
      return Tensor::from({edge_count(a.nodes), kOpCount}, std::move(v), true);
    };
    a.normal = read(j.at("normal"));
    a.reduction = read(j.at("reduction"));
  } catch (const json::exception& e) {
    throw SchemaError(std::string("malformed alphas: ") + e.what());
  }
  return a;
}

// ---------------------------------------------------------------------------
// Modules
// ---------------------------------------------------------------------------

namespace {

struct Visitor {
  std::function<void(const std::string&, Tensor&)> param;
  std::function<void(const std::string&, BatchNormState&)> buffer;
};

struct Module {
  virtual ~Module() = default;
  virtual Tensor forward(const Tensor& x, Mode mode) = 0;
  virtual void visit(const std::string& prefix, const Visitor& v) = 0;
};

using ModulePtr = std::unique_ptr<Module>;

Tensor conv_weight(std::size_t out, std::size_t in_per_group, std::size_t k, Rng& rng) {
  return init_uniform_fan_in({out, in_per_group, k, k}, in_per_group * k * k, rng);
}

struct BatchNorm {
  Tensor gamma;
  Tensor beta;
  BatchNormState state;

  explicit BatchNorm(std::size_t c) : gamma(Tensor::full({c}, 1.0, true)), beta(Tensor::zeros({c}, true)), state(c) {}
  Tensor forward(const Tensor& x, Mode mode) { return batch_norm2d(x, gamma, beta, state, mode); }
  void visit(const std::string& prefix, const Visitor& v) {
    v.param(prefix + "gamma", gamma);
    v.param(prefix + "beta", beta);
    v.buffer(prefix, state);
  }
};

struct ReluConvBn : Module {
  Tensor weight;
  Conv2dOptions opts;
  BatchNorm bn;

  ReluConvBn(std::size_t c_in, std::size_t c_out, std::size_t k, std::size_t stride, std::size_t pad, Rng& rng)
      : weight(conv_weight(c_out, c_in, k, rng)), opts{stride, pad, 1, 1}, bn(c_out) {}
  Tensor forward(const Tensor& x, Mode mode) override { return bn.forward(conv2d(relu(x), weight, opts), mode); }
  void visit(const std::string& prefix, const Visitor& v) override {
    v.param(prefix + "conv.weight", weight);
    bn.visit(prefix + "bn.", v);
  }
};

// ReLU, depthwise (optionally dilated) conv, pointwise conv, batch norm.
struct DilConv : Module {
  Tensor depthwise;
  Tensor pointwise;
  Conv2dOptions dw_opts;
  BatchNorm bn;

  DilConv(std::size_t c_in, std::size_t c_out, std::size_t k, std::size_t stride, std::size_t pad,
          std::size_t dilation, Rng& rng)
      : depthwise(conv_weight(c_in, 1, k, rng)),
        pointwise(conv_weight(c_out, c_in, 1, rng)),
        dw_opts{stride, pad, dilation, c_in},
        bn(c_out) {}
  Tensor forward(const Tensor& x, Mode mode) override {
    return bn.forward(conv2d(conv2d(relu(x), depthwise, dw_opts), pointwise), mode);
  }
  void visit(const std::string& prefix, const Visitor& v) override {
    v.param(prefix + "dw.weight", depthwise);
    v.param(prefix + "pw.weight", pointwise);
    bn.visit(prefix + "bn.", v);
  }
};

struct SepConv : Module {
  DilConv first;
  DilConv second;

  SepConv(std::size_t c, std::size_t k, std::size_t stride, Rng& rng)
      : first(c, c, k, stride, k / 2, 1, rng), second(c, c, k, 1, k / 2, 1, rng) {}
  Tensor forward(const Tensor& x, Mode mode) override { return second.forward(first.forward(x, mode), mode); }
  void visit(const std::string& prefix, const Visitor& v) override {
    first.visit(prefix + "0.", v);
    second.visit(prefix + "1.", v);
  }
};

struct Pool : Module {
  PoolKind kind;
  std::size_t stride;

  Pool(PoolKind k, std::size_t s) : kind(k), stride(s) {}
  Tensor forward(const Tensor& x, Mode) override { return pool2d(x, kind, {3, stride, 1}); }
  void visit(const std::string&, const Visitor&) override {}
};

struct Identity : Module {
  Tensor forward(const Tensor& x, Mode) override { return x; }
  void visit(const std::string&, const Visitor&) override {}
};

// Halves resolution with two offset 1x1 stride-2 convolutions.
struct FactorizedReduce : Module {
  Tensor conv_a;
  Tensor conv_b;
  BatchNorm bn;

  FactorizedReduce(std::size_t c_in, std::size_t c_out, Rng& rng)
      : conv_a(conv_weight(c_out - c_out / 2, c_in, 1, rng)), bn(c_out) {
    // A single output channel has no room for the offset half.
    if (c_out >= 2) conv_b = conv_weight(c_out / 2, c_in, 1, rng);
  }
  Tensor forward(const Tensor& x, Mode mode) override {
    const auto r = relu(x);
    Tensor a = conv2d(r, conv_a, {2, 0, 1, 1});
    if (!conv_b.defined()) return bn.forward(a, mode);
    const Tensor parts[2] = {a, conv2d(crop2d(r, 1, 1, r.dim(2) - 1, r.dim(3) - 1), conv_b, {2, 0, 1, 1})};
    return bn.forward(concat_channels(parts), mode);
  }
  void visit(const std::string& prefix, const Visitor& v) override {
    v.param(prefix + "conv_a.weight", conv_a);
    if (conv_b.defined()) v.param(prefix + "conv_b.weight", conv_b);
    bn.visit(prefix + "bn.", v);
  }
};

// nullptr for the zero op.
ModulePtr make_op(OpKind op, std::size_t c, std::size_t stride, Rng& rng) {
  switch (op) {
    case OpKind::skip:
      if (stride == 1) return std::make_unique<Identity>();
      return std::make_unique<FactorizedReduce>(c, c, rng);
    case OpKind::dil_conv_3x3: return std::make_unique<DilConv>(c, c, 3, stride, 2, 2, rng);
    case OpKind::dil_conv_5x5: return std::make_unique<DilConv>(c, c, 5, stride, 4, 2, rng);
    case OpKind::sep_conv_3x3: return std::make_unique<SepConv>(c, 3, stride, rng);
    case OpKind::sep_conv_5x5: return std::make_unique<SepConv>(c, 5, stride, rng);
    case OpKind::avg_pool_3x3: return std::make_unique<Pool>(PoolKind::avg, stride);
    case OpKind::max_pool_3x3: return std::make_unique<Pool>(PoolKind::max, stride);
    case OpKind::zero: return nullptr;
  }
  return nullptr;
}

struct Cell {
  bool reduction = false;
  std::size_t nodes = 0;
  ModulePtr pre0;
  ModulePtr pre1;
  // Supernet: ops[edge][menu position]. Discrete: only the chosen entries.
  std::vector<std::vector<ModulePtr>> ops;
  std::optional<CellGenotype> genotype;

  Cell(std::size_t c_pp, std::size_t c_p, std::size_t c, bool red, bool red_prev, std::size_t n,
       const CellGenotype* chosen, Rng& rng)
      : reduction(red), nodes(n) {
    if (red_prev) {
      pre0 = std::make_unique<FactorizedReduce>(c_pp, c, rng);
    } else {
      pre0 = std::make_unique<ReluConvBn>(c_pp, c, 1, 1, 0, rng);
    }
    pre1 = std::make_unique<ReluConvBn>(c_p, c, 1, 1, 0, rng);
    ops.resize(edge_count(n));
    for (auto& row : ops) row.resize(kOpCount);
    if (chosen) {
      genotype = *chosen;
      for (std::size_t j = 0; j < n; ++j) {
        for (const auto& e : chosen->nodes[j]) {
          const std::size_t stride = red && e.input < 2 ? 2 : 1;
          ops[edge_index(j, e.input)][static_cast<std::size_t>(e.op)] = make_op(e.op, c, stride, rng);
        }
      }
    } else {
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i < j + 2; ++i) {
          const std::size_t stride = red && i < 2 ? 2 : 1;
          for (std::size_t o = 0; o < kOpCount; ++o) ops[edge_index(j, i)][o] = make_op(op_menu()[o], c, stride, rng);
        }
      }
    }
  }

  // weights: softmax of the alphas for this cell kind (supernet only).
  Tensor forward(const Tensor& s0, const Tensor& s1, Mode mode, const Tensor* weights) {
    std::vector<Tensor> states{pre0->forward(s0, mode), pre1->forward(s1, mode)};
    for (std::size_t j = 0; j < nodes; ++j) {
      std::vector<Tensor> terms;
      if (genotype) {
        for (const auto& e : genotype->nodes[j]) {
          terms.push_back(ops[edge_index(j, e.input)][static_cast<std::size_t>(e.op)]->forward(states[e.input], mode));
        }
      } else {
        for (std::size_t i = 0; i < j + 2; ++i) {
          const std::size_t e = edge_index(j, i);
          for (std::size_t o = 0; o < kOpCount; ++o) {
            // The zero op contributes nothing to the sum.
            if (!ops[e][o]) continue;
            terms.push_back(scale_by_element(ops[e][o]->forward(states[i], mode), *weights, e * kOpCount + o));
          }
        }
      }
      states.push_back(add_n(terms));
    }
    return concat_channels(std::span<const Tensor>(states).subspan(2));
  }

  void visit(const std::string& prefix, const Visitor& v) {
    pre0->visit(prefix + "pre0.", v);
    pre1->visit(prefix + "pre1.", v);
    for (std::size_t e = 0; e < ops.size(); ++e) {
      for (std::size_t o = 0; o < kOpCount; ++o) {
        if (ops[e][o]) {
          ops[e][o]->visit(prefix + "edge." + std::to_string(e) + "." + std::string(to_string(op_menu()[o])) + ".", v);
        }
      }
    }
  }
};

}  // namespace

// ---------------------------------------------------------------------------
// CellNetwork
// ---------------------------------------------------------------------------

void CellNetConfig::check() const {
  if (layers < 2) throw SpecError("cell network needs at least 2 layers");
  if (nodes < 1) throw SpecError("cells need at least one node");
  if (channels < 1) throw SpecError("channels per node must be positive");
  if (input_channels < 1 || input_size < 1) throw SpecError("input shape must be positive");
  if (stem_multiplier < 1 || stem_stride < 1) throw SpecError("stem multiplier and stride must be positive");
  std::size_t size = (input_size - 1) / stem_stride + 1;
  for (std::size_t r = 0; r < reduction_layers(layers).size(); ++r) {
    if (size % 2 != 0 || size < 2) {
      throw SpecError("input size " + std::to_string(input_size) + " cannot be halved at every reduction cell");
    }
    size /= 2;
  }
}

json to_json(const CellNetConfig& c) {
  return {{"layers", c.layers},
          {"nodes", c.nodes},
          {"channels", c.channels},
          {"input_channels", c.input_channels},
          {"input_size", c.input_size},
          {"stem_multiplier", c.stem_multiplier},
          {"stem_stride", c.stem_stride},
          {"max_parameters", c.max_parameters}};
}

CellNetConfig cell_net_config_from_json(const json& j) {
  CellNetConfig c;
  try {
    c.layers = j.value("layers", c.layers);
    c.nodes = j.value("nodes", c.nodes);
    c.channels = j.value("channels", c.channels);
    c.input_channels = j.value("input_channels", c.input_channels);
    c.input_size = j.value("input_size", c.input_size);
    c.stem_multiplier = j.value("stem_multiplier", c.stem_multiplier);
    c.stem_stride = j.value("stem_stride", c.stem_stride);
    c.max_parameters = j.value("max_parameters", c.max_parameters);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed cell network config: ") + e.what());
  }
  c.check();
  return c;
}

struct CellNetwork::Impl {
  CellNetConfig config;
  std::optional<Genotype> genotype;
  Tensor stem_weight;
  std::unique_ptr<BatchNorm> stem_bn;
  std::vector<Cell> cells;
  Tensor head_weight;
  Tensor head_bias;

  void visit(const Visitor& v) {
    v.param("stem.conv.weight", stem_weight);
    stem_bn->visit("stem.bn.", v);
    for (std::size_t k = 0; k < cells.size(); ++k) cells[k].visit("cells." + std::to_string(k) + ".", v);
    v.param("head.weight", head_weight);
    v.param("head.bias", head_bias);
  }
};

CellNetwork::CellNetwork(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}
CellNetwork::CellNetwork(CellNetwork&&) noexcept = default;
CellNetwork& CellNetwork::operator=(CellNetwork&&) noexcept = default;
CellNetwork::~CellNetwork() = default;

namespace {

std::unique_ptr<CellNetwork::Impl> build_impl(const CellNetConfig& config, const Genotype* genotype, Rng& rng) {
  config.check();
  if (genotype) {
    validate_genotype(*genotype);
    if (genotype->normal.nodes.size() != config.nodes) {
      throw SpecError("genotype has " + std::to_string(genotype->normal.nodes.size()) + " nodes per cell, config has " +
                      std::to_string(config.nodes));
    }
  }
  auto impl = std::make_unique<CellNetwork::Impl>();
  impl->config = config;
  if (genotype) impl->genotype = *genotype;
  const std::size_t c_stem = config.stem_multiplier * config.channels;
  impl->stem_weight = conv_weight(c_stem, config.input_channels, 3, rng);
  impl->stem_bn = std::make_unique<BatchNorm>(c_stem);
  std::size_t c_pp = c_stem, c_p = c_stem, c = config.channels;
  bool red_prev = false;
  const auto reductions = reduction_layers(config.layers);
  for (std::size_t k = 0; k < config.layers; ++k) {
    const bool red = std::find(reductions.begin(), reductions.end(), k) != reductions.end();
    if (red) c *= 2;
    const CellGenotype* chosen = genotype ? (red ? &genotype->reduction : &genotype->normal) : nullptr;
    impl->cells.emplace_back(c_pp, c_p, c, red, red_prev, config.nodes, chosen, rng);
    red_prev = red;
    c_pp = c_p;
    c_p = config.nodes * c;
  }
  impl->head_weight = init_uniform_fan_in({c_p, 1}, c_p, rng);
  impl->head_bias = init_uniform_fan_in({1}, c_p, rng);
  std::size_t count = 0;
  impl->visit({[&](const std::string&, Tensor& t) { count += t.numel(); }, [](const std::string&, BatchNormState&) {}});
  if (count > config.max_parameters) {
    throw SpecError("network would have " + std::to_string(count) + " parameters, above the limit of " +
                    std::to_string(config.max_parameters));
  }
  return impl;
}

}  // namespace

CellNetwork CellNetwork::supernet(const CellNetConfig& config, Rng& rng) {
  return CellNetwork(build_impl(config, nullptr, rng));
}

CellNetwork CellNetwork::discrete(const Genotype& genotype, const CellNetConfig& config, Rng& rng) {
  return CellNetwork(build_impl(config, &genotype, rng));
}

bool CellNetwork::is_supernet() const { return !impl_->genotype; }
const CellNetConfig& CellNetwork::config() const { return impl_->config; }
const std::optional<Genotype>& CellNetwork::genotype() const { return impl_->genotype; }

Tensor CellNetwork::forward(const Tensor& x, Mode mode, double dropout_rate, Rng& rng, const AlphaParams* alphas) const {
  const auto& cfg = impl_->config;
  if (x.rank() != 4 || x.dim(1) != cfg.input_channels || x.dim(2) != cfg.input_size || x.dim(3) != cfg.input_size) {
    throw DimensionError("cell network expects [b, " + std::to_string(cfg.input_channels) + ", " +
                         std::to_string(cfg.input_size) + ", " + std::to_string(cfg.input_size) + "] input, got " +
                         shape_string(x.shape()));
  }
  Tensor w_normal, w_reduction;
  if (is_supernet()) {
    if (!alphas) throw UsageError("supernet forward needs alphas");
    if (alphas->nodes != cfg.nodes) throw DimensionError("alphas were made for a different node count");
    w_normal = softmax(alphas->normal);
    w_reduction = softmax(alphas->reduction);
  }
  const Tensor stem = impl_->stem_bn->forward(conv2d(x, impl_->stem_weight, {cfg.stem_stride, 1, 1, 1}), mode);
  Tensor s0 = stem, s1 = stem;
  for (auto& cell : impl_->cells) {
    Tensor next = cell.forward(s0, s1, mode, cell.reduction ? &w_reduction : &w_normal);
    s0 = s1;
    s1 = next;
  }
  Tensor pooled = dropout(global_avg_pool(s1), dropout_rate, mode, rng);
  return sigmoid(add_bias(matmul(pooled, impl_->head_weight), impl_->head_bias));
}

ParameterList CellNetwork::parameters() const {
  ParameterList out;
  impl_->visit({[&](const std::string& name, Tensor& t) { out.push_back({name, t}); },
                [](const std::string&, BatchNormState&) {}});
  return out;
}

std::vector<CheckpointArray> CellNetwork::state() const {
  std::vector<CheckpointArray> out;
  impl_->visit({[&](const std::string& name, Tensor& t) {
                  out.push_back({name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
                },
                [&](const std::string& prefix, BatchNormState& s) {
                  out.push_back({prefix + "running_mean", {s.running_mean.size()}, s.running_mean});
                  out.push_back({prefix + "running_var", {s.running_var.size()}, s.running_var});
                }});
  return out;
}

namespace {

std::size_t load_arrays(CellNetwork::Impl& impl, const std::vector<CheckpointArray>& arrays, bool require_all) {
  std::map<std::string, const CheckpointArray*> by_name;
  for (const auto& a : arrays) by_name[a.name] = &a;
  std::size_t loaded = 0;
  auto fetch = [&](const std::string& name, std::size_t numel) -> const CheckpointArray* {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      if (require_all) throw SchemaError("checkpoint lacks '" + name + "'");
      return nullptr;
    }
    if (it->second->values.size() != numel) throw SchemaError("checkpoint array '" + name + "' has the wrong size");
    ++loaded;
    return it->second;
  };
  impl.visit({[&](const std::string& name, Tensor& t) {
                if (auto a = fetch(name, t.numel())) std::copy(a->values.begin(), a->values.end(), t.mutable_data().begin());
              },
              [&](const std::string& prefix, BatchNormState& s) {
                if (auto a = fetch(prefix + "running_mean", s.running_mean.size())) s.running_mean = a->values;
                if (auto a = fetch(prefix + "running_var", s.running_var.size())) s.running_var = a->values;
              }});
  return loaded;
}

}  // namespace

void CellNetwork::load_state(const std::vector<CheckpointArray>& arrays) { load_arrays(*impl_, arrays, true); }

std::size_t CellNetwork::load_matching(const std::vector<CheckpointArray>& arrays) {
  return load_arrays(*impl_, arrays, false);
}

Tensor apply_op(OpKind op, const Tensor& x, std::size_t stride, Rng& rng) {
  if (x.rank() != 4) throw DimensionError("apply_op expects an NCHW tensor");
  auto m = make_op(op, x.dim(1), stride, rng);
  if (!m) {
    const std::size_t h = (x.dim(2) - 1) / stride + 1, w = (x.dim(3) - 1) / stride + 1;
    return Tensor::zeros({x.dim(0), x.dim(1), h, w});
  }
  return m->forward(x, Mode::train);
}

Tensor mixed_op(const Tensor& x, const Tensor& edge_alpha, std::size_t stride, Rng& rng) {
  if (edge_alpha.numel() != kOpCount) throw DimensionError("edge alpha must have one logit per op");
  const auto w = softmax(reshape(edge_alpha, {1, kOpCount}));
  std::vector<Tensor> terms;
  for (std::size_t o = 0; o < kOpCount; ++o) {
    auto m = make_op(op_menu()[o], x.dim(1), stride, rng);
    if (m) terms.push_back(scale_by_element(m->forward(x, Mode::train), w, o));
  }
  return add_n(terms);
}

// ---------------------------------------------------------------------------
// Image data
// ---------------------------------------------------------------------------

Tensor ImageSet::batch(std::span<const std::size_t> rows) const {
  const std::size_t n = image_numel();
  std::vector<double> out;
  out.reserve(rows.size() * n);
  for (auto r : rows) {
    if (r >= size()) throw DimensionError("image row out of range");
    out.insert(out.end(), pixels.begin() + static_cast<std::ptrdiff_t>(r * n),
               pixels.begin() + static_cast<std::ptrdiff_t>((r + 1) * n));
  }
  return Tensor::from({rows.size(), channels, height, width}, std::move(out));
}

ImageSet ImageSet::subset(std::span<const std::size_t> rows) const {
  ImageSet out{channels, height, width, {}, {}};
  const std::size_t n = image_numel();
  for (auto r : rows) {
    out.pixels.insert(out.pixels.end(), pixels.begin() + static_cast<std::ptrdiff_t>(r * n),
                      pixels.begin() + static_cast<std::ptrdiff_t>((r + 1) * n));
    out.labels.push_back(labels.at(r));
  }
  return out;
}

ImageSet image_set_from(std::span<const ImageSample> samples) {
  ImageSet out{1, kImageSize, kImageSize, {}, {}};
  out.pixels.reserve(samples.size() * kImageSize * kImageSize);
  for (const auto& s : samples) {
    out.pixels.insert(out.pixels.end(), s.pixels.begin(), s.pixels.end());
    out.labels.push_back(s.label);
  }
  return out;
}

ImageSet synth_pattern_images(const PatternImageOptions& options, std::uint64_t seed) {
  if (options.size < 5) throw SpecError("pattern images need at least 5x5 pixels");
  static constexpr double kPattern[3][3] = {{1, -1, 1}, {-1, 0, -1}, {1, -1, 1}};
  Rng rng(seed);
  const std::size_t s = options.size;
  ImageSet out{1, s, s, std::vector<double>(options.n * s * s), std::vector<int>(options.n)};
  for (std::size_t i = 0; i < options.n; ++i) {
    double* img = out.pixels.data() + i * s * s;
    for (std::size_t p = 0; p < s * s; ++p) img[p] = options.noise * rng.normal();
    const int label = static_cast<int>(rng.below(2));
    const double sign = label ? 1.0 : -1.0;
    const std::size_t top = rng.below(s - 4), left = rng.below(s - 4);
    for (std::size_t y = 0; y < 3; ++y) {
      for (std::size_t x = 0; x < 3; ++x) img[(top + 2 * y) * s + left + 2 * x] += sign * options.amplitude * kPattern[y][x];
    }
    out.labels[i] = label;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Search and training
// ---------------------------------------------------------------------------

namespace {

Tensor label_tensor(const ImageSet& data, std::span<const std::size_t> rows) {
  std::vector<double> y;
  for (auto r : rows) y.push_back(data.labels[r]);
  return Tensor::from({rows.size(), 1}, std::move(y));
}

void check_images(const ImageSet& data, const CellNetConfig& cfg, const char* what) {
  if (data.size() == 0) throw DataError(std::string(what) + " image set is empty");
  if (data.channels != cfg.input_channels || data.height != cfg.input_size || data.width != cfg.input_size) {
    throw DataError(std::string(what) + " images do not match the network input shape");
  }
}

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(idx.begin(), idx.end());
  return idx;
}

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  double f1 = 0.0;
};

EvalResult evaluate_images(const CellNetwork& net, const ImageSet& data, const AlphaParams* alphas,
                           std::size_t batch = 256) {
  Rng unused(0);
  double loss_sum = 0.0;
  std::vector<double> scores;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    std::vector<std::size_t> rows(std::min(batch, data.size() - start));
    std::iota(rows.begin(), rows.end(), start);
    auto pred = net.forward(data.batch(rows), Mode::eval, 0.0, unused, alphas);
    loss_sum += loss(LossKind::bce, pred, label_tensor(data, rows)).item() * static_cast<double>(rows.size());
    scores.insert(scores.end(), pred.data().begin(), pred.data().end());
  }
  const auto m = basic_metrics(confusion(scores, data.labels, 0.5));
  return {loss_sum / static_cast<double>(data.size()), m.accuracy, m.f1};
}

}  // namespace

std::vector<DartsEpoch> darts_search(CellNetwork& supernet, AlphaParams& alphas, const ImageSet& train,
                                     const ImageSet& valid, const DartsSearchOptions& options, Rng& rng,
                                     const AlphaStepCallback& on_alpha_step) {
  if (!supernet.is_supernet()) throw UsageError("darts_search needs a supernet");
  check_images(train, supernet.config(), "search train");
  check_images(valid, supernet.config(), "search valid");
  if (options.batch_size == 0) throw ConfigError("batch size must be positive");
  auto weights = tensors_of(supernet.parameters());
  std::vector<Tensor> arch{alphas.normal, alphas.reduction};
  Sgd sgd({options.weight_lr_max, options.weight_momentum, options.weight_decay});
  Adam adam({options.alpha_lr, options.alpha_beta1, options.alpha_beta2, 1e-8, options.alpha_weight_decay});
  CosineSchedule schedule(options.weight_lr_max, options.weight_lr_min, options.epochs);

  std::vector<DartsEpoch> history;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    sgd.set_lr(schedule.at(epoch));
    const auto order = shuffled(train.size(), rng);
    const auto vorder = shuffled(valid.size(), rng);
    const std::size_t batch = std::min(options.batch_size, train.size());
    const std::size_t vbatch = std::min(options.batch_size, valid.size());
    double loss_sum = 0.0;
    std::size_t seen = 0;
    std::size_t vpos = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      std::span<const std::size_t> rows(order.data() + start, std::min(batch, order.size() - start));
      // Weight step on the training half.
      zero_grads(weights);
      zero_grads(arch);
      auto pred = supernet.forward(train.batch(rows), Mode::train, options.dropout, rng, &alphas);
      auto l = loss(LossKind::bce, pred, label_tensor(train, rows));
      if (!std::isfinite(l.item())) throw NumericError("non-finite loss during architecture search");
      l.backward();
      clip_grad_norm(weights, options.grad_clip);
      sgd.step(weights);
      loss_sum += l.item() * static_cast<double>(rows.size());
      seen += rows.size();

      // Alpha step on the validation half.
      if (vpos + vbatch > vorder.size()) vpos = 0;
      std::span<const std::size_t> vrows(vorder.data() + vpos, vbatch);
      vpos += vbatch;
      zero_grads(weights);
      zero_grads(arch);
      auto vpred = supernet.forward(valid.batch(vrows), Mode::train, options.dropout, rng, &alphas);
      auto vl = loss(LossKind::bce, vpred, label_tensor(valid, vrows));
      vl.backward();
      adam.step(arch);
      if (on_alpha_step) on_alpha_step(alphas);
    }
    const auto ev = evaluate_images(supernet, valid, &alphas);
    history.push_back({epoch + 1, loss_sum / static_cast<double>(seen), ev.loss, ev.accuracy});
  }
  for (auto& t : weights) t.clear_grad();
  for (auto& t : arch) t.clear_grad();
  return history;
}

std::size_t select_min_loss_epoch(const std::vector<EpochMetrics>& history) {
  std::size_t best = 0;
  for (std::size_t i = 0; i < history.size(); ++i) {
    if (best == 0 || history[i].val_loss < history[best - 1].val_loss) best = i + 1;
  }
  return best == 0 ? 0 : history[best - 1].epoch;
}

FinalTrainResult train_final(CellNetwork& network, const ImageSet& train, const ImageSet& valid,
                             const FinalTrainOptions& options, Rng& rng, const EpochCallback& on_epoch) {
  if (network.is_supernet()) throw UsageError("train_final needs a discrete network");
  check_images(train, network.config(), "train");
  check_images(valid, network.config(), "valid");
  if (options.batch_size == 0) throw ConfigError("batch size must be positive");
  auto params = tensors_of(network.parameters());
  Adam adam({options.learning_rate});
  FinalTrainResult result;
  std::vector<CheckpointArray> best_state = network.state();
  double best_loss = std::numeric_limits<double>::infinity();
  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    const auto order = shuffled(train.size(), rng);
    const std::size_t batch = std::min(options.batch_size, train.size());
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      std::span<const std::size_t> rows(order.data() + start, std::min(batch, order.size() - start));
      zero_grads(params);
      auto pred = network.forward(train.batch(rows), Mode::train, options.dropout, rng);
      auto l = loss(LossKind::bce, pred, label_tensor(train, rows));
      if (!std::isfinite(l.item())) throw NumericError("non-finite loss during final training");
      l.backward();
      adam.step(params);
      loss_sum += l.item() * static_cast<double>(rows.size());
    }
    const auto ev = evaluate_images(network, valid, nullptr);
    EpochMetrics m{epoch, loss_sum / static_cast<double>(train.size()), ev.loss, ev.f1, ev.accuracy};
    result.history.push_back(m);
    if (ev.loss < best_loss) {
      best_loss = ev.loss;
      best_state = network.state();
    }
    if (on_epoch) on_epoch(m);
  }
  for (auto& t : params) t.clear_grad();
  result.best_epoch = select_min_loss_epoch(result.history);
  network.load_state(best_state);
  return result;
}

std::vector<double> predict_images(const CellNetwork& network, const ImageSet& data, std::size_t batch) {
  Rng unused(0);
  std::vector<double> out;
  out.reserve(data.size());
  for (std::size_t start = 0; start < data.size(); start += batch) {
    std::vector<std::size_t> rows(std::min(batch, data.size() - start));
    std::iota(rows.begin(), rows.end(), start);
    auto pred = network.forward(data.batch(rows), Mode::eval, 0.0, unused);
    out.insert(out.end(), pred.data().begin(), pred.data().end());
  }
  return out;
}

Checkpoint cell_network_checkpoint(const CellNetwork& network, const json& extra) {
  if (network.is_supernet()) throw UsageError("only discrete networks are checkpointed");
  Checkpoint ck;
  ck.config = extra;
  ck.config["model"] = "cell_network";
  ck.config["network"] = to_json(network.config());
  ck.config["genotype"] = genotype_to_text(*network.genotype());
  ck.arrays = network.state();
  return ck;
}

CellNetwork cell_network_from_checkpoint(const Checkpoint& checkpoint) {
  if (checkpoint.config.value("model", "") != "cell_network") throw SchemaError("checkpoint is not a cell network");
  Rng rng(0);
  auto net = CellNetwork::discrete(genotype_from_text(checkpoint.config.at("genotype").get<std::string>()),
                                   cell_net_config_from_json(checkpoint.config.at("network")), rng);
  net.load_state(checkpoint.arrays);
  return net;
}

}  // namespace malnas
