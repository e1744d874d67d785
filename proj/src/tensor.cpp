#include "refexp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "refexp/errors.hpp"

namespace refexp {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t extent : shape) n *= extent;
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape_in, std::vector<double> values_in)
    : shape(std::move(shape_in)), values(std::move(values_in)) {
  for (std::size_t extent : shape) {
    if (extent == 0) throw DimensionError("tensor extents must be positive");
  }
  if (values.size() != product(shape)) {
    throw DimensionError("value count " + std::to_string(values.size()) +
                         " does not match shape product " + std::to_string(product(shape)));
  }
}

Tensor Tensor::zeros(std::vector<std::size_t> shape_in) {
  std::size_t n = product(shape_in);
  return Tensor(std::move(shape_in), std::vector<double>(n, 0.0));
}

Tensor Tensor::row_vector(std::vector<double> values_in) {
  std::size_t n = values_in.size();
  return Tensor({1, n}, std::move(values_in));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values_in) {
  return Tensor({rows, cols}, std::move(values_in));
}

std::size_t Tensor::numel() const { return values.size(); }

std::size_t Tensor::rows() const {
  if (shape.size() >= 2) return shape[0];
  return 1;
}

std::size_t Tensor::cols() const {
  if (shape.empty()) return 1;
  if (shape.size() == 1) return shape[0];
  return shape[1];
}

double Tensor::at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }

double& Tensor::at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }

void Tensor::ensure_grad() {
  if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
}

void Tensor::zero_grad() { grad.assign(values.size(), 0.0); }

bool Tensor::all_finite() const {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw DimensionError("softmax of empty vector");
  double max_logit = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - max_logit);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

int Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return static_cast<int>(nodes_.size()) - 1;
}

const Graph::Node& Graph::node_at(int id) const {
  if (id < 0 || id >= static_cast<int>(nodes_.size())) throw IndexError("bad node id");
  return nodes_[static_cast<std::size_t>(id)];
}

Graph::Node& Graph::node_at(int id) {
  if (id < 0 || id >= static_cast<int>(nodes_.size())) throw IndexError("bad node id");
  return nodes_[static_cast<std::size_t>(id)];
}

int Graph::input(std::span<const double> values, std::size_t rows, std::size_t cols) {
  if (values.size() != rows * cols) throw DimensionError("input size does not match rows*cols");
  Node node;
  node.op = OpKind::kInput;
  node.rows = rows;
  node.cols = cols;
  node.values.assign(values.begin(), values.end());
  return push(std::move(node));
}

int Graph::input_row(std::span<const double> values) { return input(values, 1, values.size()); }

int Graph::zeros(std::size_t rows, std::size_t cols) {
  Node node;
  node.op = OpKind::kInput;
  node.rows = rows;
  node.cols = cols;
  node.values.assign(rows * cols, 0.0);
  return push(std::move(node));
}

int Graph::param(Tensor& tensor) {
  auto cached = param_nodes_.find(&tensor);
  if (cached != param_nodes_.end()) return cached->second;
  Node node;
  node.op = OpKind::kParam;
  node.rows = tensor.rows();
  node.cols = tensor.cols();
  node.values = tensor.values;
  node.param = &tensor;
  int id = push(std::move(node));
  param_nodes_.emplace(&tensor, id);
  return id;
}

int Graph::matmul(int a, int b) {
  const Node& na = node_at(a);
  const Node& nb = node_at(b);
  if (na.cols != nb.rows) {
    throw DimensionError("matmul inner extents " + std::to_string(na.cols) + " vs " +
                         std::to_string(nb.rows));
  }
  Node node;
  node.op = OpKind::kMatMul;
  node.rows = na.rows;
  node.cols = nb.cols;
  node.inputs = {a, b};
  node.values.assign(node.rows * node.cols, 0.0);
  for (std::size_t i = 0; i < na.rows; ++i) {
    for (std::size_t k = 0; k < na.cols; ++k) {
      double aik = na.values[i * na.cols + k];
      if (aik == 0.0) continue;
      const double* brow = nb.values.data() + k * nb.cols;
      double* crow = node.values.data() + i * node.cols;
      for (std::size_t j = 0; j < nb.cols; ++j) crow[j] += aik * brow[j];
    }
  }
  return push(std::move(node));
}

int Graph::add(int a, int b) {
  const Node& na = node_at(a);
  const Node& nb = node_at(b);
  if (na.rows != nb.rows || na.cols != nb.cols) throw DimensionError("add shape mismatch");
  Node node;
  node.op = OpKind::kAdd;
  node.rows = na.rows;
  node.cols = na.cols;
  node.inputs = {a, b};
  node.values.resize(na.values.size());
  for (std::size_t i = 0; i < node.values.size(); ++i) node.values[i] = na.values[i] + nb.values[i];
  return push(std::move(node));
}

int Graph::add_row_bias(int a, int bias) {
  const Node& na = node_at(a);
  const Node& nb = node_at(bias);
  if (nb.rows != 1 || nb.cols != na.cols) throw DimensionError("bias must be 1 x cols(a)");
  Node node;
  node.op = OpKind::kAddRowBias;
  node.rows = na.rows;
  node.cols = na.cols;
  node.inputs = {a, bias};
  node.values.resize(na.values.size());
  for (std::size_t r = 0; r < na.rows; ++r) {
    for (std::size_t c = 0; c < na.cols; ++c) {
      node.values[r * na.cols + c] = na.values[r * na.cols + c] + nb.values[c];
    }
  }
  return push(std::move(node));
}

int Graph::sub(int a, int b) {
  const Node& na = node_at(a);
  const Node& nb = node_at(b);
  if (na.rows != nb.rows || na.cols != nb.cols) throw DimensionError("sub shape mismatch");
  Node node;
  node.op = OpKind::kSub;
  node.rows = na.rows;
  node.cols = na.cols;
  node.inputs = {a, b};
  node.values.resize(na.values.size());
  for (std::size_t i = 0; i < node.values.size(); ++i) node.values[i] = na.values[i] - nb.values[i];
  return push(std::move(node));
}

int Graph::mul(int a, int b) {
  const Node& na = node_at(a);
  const Node& nb = node_at(b);
  if (na.rows != nb.rows || na.cols != nb.cols) throw DimensionError("mul shape mismatch");
  Node node;
  node.op = OpKind::kMul;
  node.rows = na.rows;
  node.cols = na.cols;
  node.inputs = {a, b};
  node.values.resize(na.values.size());
  for (std::size_t i = 0; i < node.values.size(); ++i) node.values[i] = na.values[i] * nb.values[i];
  return push(std::move(node));
}

int Graph::scale(int a, double factor) {
  const Node& na = node_at(a);
  Node node;
  node.op = OpKind::kScale;
  node.rows = na.rows;
  node.cols = na.cols;
  node.inputs = {a};
  node.factor = factor;
  node.values.resize(na.values.size());
  for (std::size_t i = 0; i < node.values.size(); ++i) node.values[i] = factor * na.values[i];
  return push(std::move(node));
}

int Graph::tanh_op(int a) {
  const Node& na = node_at(a);
  Node node;
  node.op = OpKind::kTanh;
  node.rows = na.rows;
  node.cols = na.cols;
  node.inputs = {a};
  node.values.resize(na.values.size());
  for (std::size_t i = 0; i < node.values.size(); ++i) node.values[i] = std::tanh(na.values[i]);
  return push(std::move(node));
}

int Graph::sigmoid_op(int a) {
  const Node& na = node_at(a);
  Node node;
  node.op = OpKind::kSigmoid;
  node.rows = na.rows;
  node.cols = na.cols;
  node.inputs = {a};
  node.values.resize(na.values.size());
  for (std::size_t i = 0; i < node.values.size(); ++i) {
    double x = na.values[i];
    node.values[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  return push(std::move(node));
}

int Graph::concat(std::span<const int> parts) {
  if (parts.empty()) throw DimensionError("concat of zero parts");
  std::size_t total = 0;
  for (int id : parts) {
    const Node& part = node_at(id);
    if (part.rows != 1) throw DimensionError("concat expects row vectors");
    total += part.cols;
  }
  Node node;
  node.op = OpKind::kConcat;
  node.rows = 1;
  node.cols = total;
  node.inputs.assign(parts.begin(), parts.end());
  node.values.reserve(total);
  for (int id : parts) {
    const Node& part = node_at(id);
    node.values.insert(node.values.end(), part.values.begin(), part.values.end());
  }
  return push(std::move(node));
}

int Graph::row(int matrix, std::size_t index) {
  const Node& nm = node_at(matrix);
  if (index >= nm.rows) throw IndexError("row index " + std::to_string(index) + " out of range");
  Node node;
  node.op = OpKind::kRow;
  node.rows = 1;
  node.cols = nm.cols;
  node.inputs = {matrix};
  node.index = index;
  node.values.assign(nm.values.begin() + static_cast<std::ptrdiff_t>(index * nm.cols),
                     nm.values.begin() + static_cast<std::ptrdiff_t>((index + 1) * nm.cols));
  return push(std::move(node));
}

int Graph::l2_normalize(int a, double epsilon) {
  const Node& na = node_at(a);
  Node node;
  node.op = OpKind::kL2Normalize;
  node.rows = na.rows;
  node.cols = na.cols;
  node.inputs = {a};
  double sq = 0.0;
  for (double v : na.values) sq += v * v;
  double norm = std::sqrt(sq);
  if (norm < epsilon) {
    node.norm = 0.0;
    node.values.assign(na.values.size(), 0.0);
  } else {
    node.norm = norm;
    node.values.resize(na.values.size());
    for (std::size_t i = 0; i < node.values.size(); ++i) node.values[i] = na.values[i] / norm;
  }
  return push(std::move(node));
}

int Graph::softmax_cross_entropy(int logits, std::size_t target) {
  const Node& nl = node_at(logits);
  if (nl.rows != 1) throw DimensionError("softmax_cross_entropy expects a row vector");
  if (target >= nl.cols) {
    throw IndexError("target " + std::to_string(target) + " out of range for " +
                     std::to_string(nl.cols) + " classes");
  }
  Node node;
  node.op = OpKind::kSoftmaxCrossEntropy;
  node.rows = 1;
  node.cols = 1;
  node.inputs = {logits};
  node.index = target;
  node.probs = softmax(nl.values);
  // -log p[target] via logsumexp, avoiding log of a denormal probability.
  double max_logit = *std::max_element(nl.values.begin(), nl.values.end());
  double lse = 0.0;
  for (double v : nl.values) lse += std::exp(v - max_logit);
  node.values = {std::log(lse) + max_logit - nl.values[target]};
  return push(std::move(node));
}

int Graph::add_n(std::span<const int> terms) {
  if (terms.empty()) throw DimensionError("add_n of zero terms");
  const Node& first = node_at(terms[0]);
  Node node;
  node.op = OpKind::kAddN;
  node.rows = first.rows;
  node.cols = first.cols;
  node.inputs.assign(terms.begin(), terms.end());
  node.values.assign(first.values.size(), 0.0);
  for (int id : terms) {
    const Node& term = node_at(id);
    if (term.rows != node.rows || term.cols != node.cols) {
      throw DimensionError("add_n shape mismatch");
    }
    for (std::size_t i = 0; i < node.values.size(); ++i) node.values[i] += term.values[i];
  }
  return push(std::move(node));
}

void Graph::backward(int loss_node) {
  Node& loss = node_at(loss_node);
  if (loss.values.size() != 1) throw DimensionError("backward expects a scalar loss");
  for (Node& node : nodes_) node.grad.assign(node.values.size(), 0.0);
  loss.grad[0] = 1.0;
  for (int id = loss_node; id >= 0; --id) backward_node(nodes_[static_cast<std::size_t>(id)]);
}

void Graph::backward_node(Node& node) {
  bool any = std::any_of(node.grad.begin(), node.grad.end(), [](double g) { return g != 0.0; });
  if (!any && node.op != OpKind::kParam) return;
  switch (node.op) {
    case OpKind::kInput:
      break;
    case OpKind::kParam: {
      node.param->ensure_grad();
      if (!any) break;
      for (std::size_t i = 0; i < node.grad.size(); ++i) node.param->grad[i] += node.grad[i];
      break;
    }
    case OpKind::kMatMul: {
      Node& a = node_at(node.inputs[0]);
      Node& b = node_at(node.inputs[1]);
      // dA += dC * B^T ; dB += A^T * dC
      for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t j = 0; j < b.cols; ++j) {
          double g = node.grad[i * node.cols + j];
          if (g == 0.0) continue;
          for (std::size_t k = 0; k < a.cols; ++k) {
            a.grad[i * a.cols + k] += g * b.values[k * b.cols + j];
            b.grad[k * b.cols + j] += g * a.values[i * a.cols + k];
          }
        }
      }
      break;
    }
    case OpKind::kAdd: {
      Node& a = node_at(node.inputs[0]);
      Node& b = node_at(node.inputs[1]);
      for (std::size_t i = 0; i < node.grad.size(); ++i) {
        a.grad[i] += node.grad[i];
        b.grad[i] += node.grad[i];
      }
      break;
    }
    case OpKind::kAddRowBias: {
      Node& a = node_at(node.inputs[0]);
      Node& bias = node_at(node.inputs[1]);
      for (std::size_t r = 0; r < node.rows; ++r) {
        for (std::size_t c = 0; c < node.cols; ++c) {
          double g = node.grad[r * node.cols + c];
          a.grad[r * node.cols + c] += g;
          bias.grad[c] += g;
        }
      }
      break;
    }
    case OpKind::kSub: {
      Node& a = node_at(node.inputs[0]);
      Node& b = node_at(node.inputs[1]);
      for (std::size_t i = 0; i < node.grad.size(); ++i) {
        a.grad[i] += node.grad[i];
        b.grad[i] -= node.grad[i];
      }
      break;
    }
    case OpKind::kMul: {
      Node& a = node_at(node.inputs[0]);
      Node& b = node_at(node.inputs[1]);
      for (std::size_t i = 0; i < node.grad.size(); ++i) {
        a.grad[i] += node.grad[i] * b.values[i];
        b.grad[i] += node.grad[i] * a.values[i];
      }
      break;
    }
    case OpKind::kScale: {
      Node& a = node_at(node.inputs[0]);
      for (std::size_t i = 0; i < node.grad.size(); ++i) a.grad[i] += node.factor * node.grad[i];
      break;
    }
    case OpKind::kTanh: {
      Node& a = node_at(node.inputs[0]);
      for (std::size_t i = 0; i < node.grad.size(); ++i) {
        a.grad[i] += node.grad[i] * (1.0 - node.values[i] * node.values[i]);
      }
      break;
    }
    case OpKind::kSigmoid: {
      Node& a = node_at(node.inputs[0]);
      for (std::size_t i = 0; i < node.grad.size(); ++i) {
        a.grad[i] += node.grad[i] * node.values[i] * (1.0 - node.values[i]);
      }
      break;
    }
    case OpKind::kConcat: {
      std::size_t offset = 0;
      for (int id : node.inputs) {
        Node& part = node_at(id);
        for (std::size_t i = 0; i < part.cols; ++i) part.grad[i] += node.grad[offset + i];
        offset += part.cols;
      }
      break;
    }
    case OpKind::kRow: {
      Node& m = node_at(node.inputs[0]);
      for (std::size_t i = 0; i < node.cols; ++i) {
        m.grad[node.index * m.cols + i] += node.grad[i];
      }
      break;
    }
    case OpKind::kL2Normalize: {
      if (node.norm == 0.0) break;  // guarded branch is held at zero
      Node& a = node_at(node.inputs[0]);
      double dot = 0.0;
      for (std::size_t i = 0; i < node.grad.size(); ++i) dot += node.grad[i] * node.values[i];
      for (std::size_t i = 0; i < node.grad.size(); ++i) {
        a.grad[i] += (node.grad[i] - node.values[i] * dot) / node.norm;
      }
      break;
    }
    case OpKind::kSoftmaxCrossEntropy: {
      Node& logits = node_at(node.inputs[0]);
      double g = node.grad[0];
      for (std::size_t i = 0; i < logits.grad.size(); ++i) {
        double delta = (i == node.index) ? 1.0 : 0.0;
        logits.grad[i] += g * (node.probs[i] - delta);
      }
      break;
    }
    case OpKind::kAddN: {
      for (int id : node.inputs) {
        Node& term = node_at(id);
        for (std::size_t i = 0; i < node.grad.size(); ++i) term.grad[i] += node.grad[i];
      }
      break;
    }
  }
}

double Graph::value(int node) const {
  const Node& n = node_at(node);
  if (n.values.size() != 1) throw DimensionError("value() expects a scalar node");
  return n.values[0];
}

std::span<const double> Graph::values(int node) const { return node_at(node).values; }

std::span<const double> Graph::grad(int node) const { return node_at(node).grad; }

std::size_t Graph::node_rows(int node) const { return node_at(node).rows; }

std::size_t Graph::node_cols(int node) const { return node_at(node).cols; }

}  // namespace refexp
