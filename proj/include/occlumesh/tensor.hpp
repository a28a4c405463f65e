#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "occlumesh/error.hpp"

namespace occlumesh::tensor {

using Shape = std::vector<std::int64_t>;
// Over-aligned so vectorised reductions see the same head/tail split for
// every buffer, which keeps results bit-reproducible across allocations.
using Storage = std::vector<double, Eigen::aligned_allocator<double>>;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major float64 array. Matrix views treat the last dimension as
// columns and fold every leading dimension into rows.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value) { return Tensor({1}, {value}); }
  static Tensor matrix(std::int64_t rows, std::int64_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::int64_t dim(std::size_t axis) const;
  std::int64_t rows() const;
  std::int64_t cols() const;

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  Storage& storage() noexcept { return data_; }
  const Storage& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::int64_t r, std::int64_t c) { return data_[r * cols() + c]; }
  double at(std::int64_t r, std::int64_t c) const { return data_[r * cols() + c]; }
  double item() const;

  bool requires_grad() const noexcept { return requires_grad_; }
  void set_requires_grad(bool flag) noexcept { requires_grad_ = flag; }

  MatrixMap matrix();
  ConstMatrixMap matrix() const;

  Tensor reshaped(Shape shape) const;
  bool all_finite() const;
  void fill(double value);

 private:
  Shape shape_;
  Storage data_;
  bool requires_grad_ = false;
};

class Tape;

// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const { return *tape_; }
  int id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

using Gradients = std::map<std::string, Tensor>;

// Reverse-mode record of primitive operations. Nodes are appended in
// evaluation order, so parents always precede children.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var parameter(const std::string& name, Tensor value);
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn backward);
  Var record(Tensor value, const std::vector<Var>& parents, BackwardFn backward);

  const Tensor& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  // Zero-initialised gradient buffer of a node; only valid during backward.
  Tensor& grad(Var v);

  // Runs the recorded graph backwards from `output` and returns the gradient
  // of every named parameter (zeros for parameters the output never reached).
  Gradients backward(Var output, const Tensor& seed);
  Gradients backward(Var scalar_output);

  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
    std::string param_name;
  };

  std::deque<Node> nodes_;
  bool consumed_ = false;
};

// Named flat parameter tensors, ordered by name.
using ParamMap = std::map<std::string, Tensor>;
using VarMap = std::map<std::string, Var>;

// Places every parameter on the tape. Parameters whose name starts with one of
// `frozen_prefixes` become constants, so they never receive gradients.
VarMap bind_parameters(Tape& tape, const ParamMap& params, bool requires_grad = true,
                       const std::vector<std::string>& frozen_prefixes = {});

const Var& lookup(const VarMap& vars, const std::string& name);

}  // namespace occlumesh::tensor
