#pragma once

#include <cstddef>
#include <span>
#include <unordered_map>
#include <vector>

namespace refexp {

/// Dense row-major tensor with an optional accumulated gradient buffer.
/// Rank-1 tensors behave as 1 x n row vectors in all matrix operations.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until ensure_grad(); same size as values after

  Tensor() = default;
  Tensor(std::vector<std::size_t> shape_in, std::vector<double> values_in);

  static Tensor zeros(std::vector<std::size_t> shape_in);
  static Tensor row_vector(std::vector<double> values_in);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values_in);

  std::size_t numel() const;
  std::size_t rows() const;
  std::size_t cols() const;
  double at(std::size_t r, std::size_t c) const;
  double& at(std::size_t r, std::size_t c);

  void ensure_grad();
  void zero_grad();
  bool all_finite() const;
};

/// Numerically stable softmax of a finite vector; output sums to 1.
std::vector<double> softmax(std::span<const double> logits);

/// Reverse-mode autodiff tape over rank<=2 tensors. Operations evaluate
/// eagerly; backward() walks the tape once in reverse creation order.
/// Parameter leaves accumulate into the bound Tensor's grad buffer, so
/// calling backward twice without a grad reset doubles accumulated
/// gradients by construction.
class Graph {
 public:
  enum class OpKind {
    kInput,
    kParam,
    kMatMul,
    kAdd,
    kAddRowBias,
    kSub,
    kMul,
    kScale,
    kTanh,
    kSigmoid,
    kConcat,
    kRow,
    kL2Normalize,
    kSoftmaxCrossEntropy,
    kAddN,
  };

  int input(std::span<const double> values, std::size_t rows, std::size_t cols);
  int input_row(std::span<const double> values);
  int zeros(std::size_t rows, std::size_t cols);
  /// Leaf bound to an external parameter; backward adds into tensor.grad.
  int param(Tensor& tensor);

  int matmul(int a, int b);
  int add(int a, int b);
  /// a: m x n plus a 1 x n bias row broadcast over rows.
  int add_row_bias(int a, int bias);
  int sub(int a, int b);
  int mul(int a, int b);
  int scale(int a, double factor);
  int tanh_op(int a);
  int sigmoid_op(int a);
  /// Concatenate 1 x c_i row vectors into one 1 x sum(c_i) row.
  int concat(std::span<const int> parts);
  /// 1 x cols view of one matrix row; backward scatters into that row.
  int row(int matrix, std::size_t index);
  /// x / ||x||_2, or exactly zero when ||x||_2 < epsilon.
  int l2_normalize(int a, double epsilon);
  /// Scalar -log softmax(logits)[target]; logits must be a row vector.
  int softmax_cross_entropy(int logits, std::size_t target);
  /// Elementwise sum of same-shape nodes.
  int add_n(std::span<const int> terms);

  /// Seeds d(loss)=1 and accumulates gradients through the whole tape.
  void backward(int loss_node);

  double value(int node) const;
  std::span<const double> values(int node) const;
  std::span<const double> grad(int node) const;
  std::size_t node_rows(int node) const;
  std::size_t node_cols(int node) const;
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    OpKind op;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;
    std::vector<double> grad;
    std::vector<int> inputs;
    double factor = 1.0;          // kScale
    std::size_t index = 0;        // kRow row / kSoftmaxCrossEntropy target
    double norm = 0.0;            // kL2Normalize (0 marks the guarded branch)
    std::vector<double> probs;    // kSoftmaxCrossEntropy
    Tensor* param = nullptr;      // kParam
  };

  int push(Node node);
  const Node& node_at(int id) const;
  Node& node_at(int id);
  void backward_node(Node& node);

  std::vector<Node> nodes_;
  std::unordered_map<Tensor*, int> param_nodes_;  // one leaf per bound tensor
};

}  // namespace refexp
