#include "occlumesh/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace occlumesh {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShape: return "shape";
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kBehindCamera: return "behind_camera";
    case ErrorCode::kDegenerateCamera: return "degenerate_camera";
    case ErrorCode::kEmptyInput: return "empty_input";
    case ErrorCode::kNonFinite: return "non_finite";
    case ErrorCode::kRankDeficient: return "rank_deficient";
    case ErrorCode::kUnknownPartId: return "unknown_part_id";
    case ErrorCode::kGraspFailure: return "grasp_failure";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kSchema: return "schema";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kTape: return "tape";
  }
  return "unknown";
}

}  // namespace occlumesh

namespace occlumesh::tensor {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    require(d >= 0, ErrorCode::kShape, "negative dimension in shape");
    n *= d;
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(values.begin(), values.end()) {
  require(static_cast<std::int64_t>(data_.size()) == shape_numel(shape_), ErrorCode::kShape,
          "data length " + std::to_string(data_.size()) + " does not match shape " +
              shape_string(shape_));
}

std::int64_t Tensor::dim(std::size_t axis) const {
  require(axis < shape_.size(), ErrorCode::kShape, "axis out of range");
  return shape_[axis];
}

std::int64_t Tensor::rows() const {
  if (shape_.size() <= 1) return 1;
  std::int64_t r = 1;
  for (std::size_t i = 0; i + 1 < shape_.size(); ++i) r *= shape_[i];
  return r;
}

std::int64_t Tensor::cols() const { return shape_.empty() ? 1 : shape_.back(); }

double Tensor::item() const {
  require(data_.size() == 1, ErrorCode::kShape,
          "item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

MatrixMap Tensor::matrix() { return MatrixMap(data_.data(), rows(), cols()); }

ConstMatrixMap Tensor::matrix() const { return ConstMatrixMap(data_.data(), rows(), cols()); }

Tensor Tensor::reshaped(Shape shape) const {
  require(shape_numel(shape) == static_cast<std::int64_t>(data_.size()), ErrorCode::kShape,
          "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  Tensor out;
  out.shape_ = std::move(shape);
  out.data_ = data_;
  return out;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

const Tensor& Var::value() const { return tape_->value(id_); }

bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Tensor value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::parameter(const std::string& name, Tensor value) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = true;
  node.param_name = name;
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, BackwardFn backward) {
  return record(std::move(value), std::vector<Var>(parents), std::move(backward));
}

Var Tape::record(Tensor value, const std::vector<Var>& parents, BackwardFn backward) {
  require(!consumed_, ErrorCode::kTape, "tape already consumed by backward");
  Node node;
  node.value = std::move(value);
  for (const auto& p : parents) {
    require(&p.tape() == this, ErrorCode::kTape, "op mixes vars from different tapes");
    node.requires_grad = node.requires_grad || nodes_[p.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor& Tape::grad(Var v) {
  Node& node = nodes_[v.id()];
  if (!node.has_grad) {
    node.grad = Tensor(node.value.shape(), 0.0);
    node.has_grad = true;
  }
  return node.grad;
}

Gradients Tape::backward(Var output, const Tensor& seed) {
  require(!nodes_.empty(), ErrorCode::kTape, "backward on empty tape");
  require(output.valid(), ErrorCode::kTape, "backward from an unrecorded value");
  require(!consumed_, ErrorCode::kTape, "backward already ran on this tape");
  require(&output.tape() == this, ErrorCode::kTape, "output belongs to another tape");
  require(seed.shape() == output.value().shape(), ErrorCode::kShape,
          "seed shape " + shape_string(seed.shape()) + " does not match output " +
              shape_string(output.value().shape()));
  consumed_ = true;

  Gradients result;
  if (nodes_[output.id()].requires_grad) {
    grad(output) = seed;
    for (int id = output.id(); id >= 0; --id) {
      Node& node = nodes_[id];
      if (!node.has_grad || !node.backward) continue;
      node.backward(*this, node.grad);
      // Interior gradients are no longer needed once propagated.
      if (node.param_name.empty()) node.grad = Tensor();
    }
  }
  for (auto& node : nodes_) {
    if (node.param_name.empty()) continue;
    if (node.has_grad && node.grad.size() == node.value.size()) {
      result[node.param_name] = std::move(node.grad);
    } else {
      result[node.param_name] = Tensor(node.value.shape(), 0.0);
    }
  }
  return result;
}

Gradients Tape::backward(Var scalar_output) {
  require(!nodes_.empty() && scalar_output.valid(), ErrorCode::kTape, "backward on empty tape");
  return backward(scalar_output, Tensor(scalar_output.value().shape(), 1.0));
}

VarMap bind_parameters(Tape& tape, const ParamMap& params, bool requires_grad,
                       const std::vector<std::string>& frozen_prefixes) {
  VarMap vars;
  for (const auto& [name, value] : params) {
    bool frozen = !requires_grad;
    for (const auto& prefix : frozen_prefixes) {
      if (name.rfind(prefix, 0) == 0) frozen = true;
    }
    vars.emplace(name, frozen ? tape.constant(value) : tape.parameter(name, value));
  }
  return vars;
}

const Var& lookup(const VarMap& vars, const std::string& name) {
  auto it = vars.find(name);
  require(it != vars.end(), ErrorCode::kShape, "missing parameter '" + name + "'");
  return it->second;
}

}  // namespace occlumesh::tensor
