#pragma once

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "metal/errors.hpp"
#include "metal/ndmath/dense_array.hpp"
#include "metal/rng.hpp"

namespace metal {

/// Fully connected network: ReLU on hidden layers, identity on the output.
///
/// All parameters live in one flat vector (per layer: weight matrix of shape
/// out×in in column-major order, then the bias). Optimizers and the natural
/// gradient solver work on that flat vector directly; `weight(l)`/`bias(l)`
/// are views into it. Inputs and outputs hold one sample per column.
class Mlp {
 public:
  /// Activations recorded by a forward pass, consumed by `backward`.
  struct Tape {
    std::vector<Matrix> inputs;  // input of each layer
    Matrix output;
  };

  Mlp() = default;

  /// Zero-initialized network.
  explicit Mlp(std::vector<int> widths) : widths_(std::move(widths)) {
    if (widths_.size() < 2) throw std::invalid_argument("Mlp: need at least input and output widths");
    Eigen::Index total = 0;
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
      if (widths_[l] <= 0 || widths_[l + 1] <= 0) throw std::invalid_argument("Mlp: widths must be positive");
      offsets_.push_back(total);
      total += static_cast<Eigen::Index>(widths_[l]) * widths_[l + 1] + widths_[l + 1];
    }
    params_ = Vector::Zero(total);
  }

  /// Weights uniform in ±sqrt(6 / (fan_in + fan_out)), biases zero.
  static Mlp glorot(std::vector<int> widths, Rng& rng) {
    Mlp net(std::move(widths));
    for (int l = 0; l < net.num_layers(); ++l) {
      const double limit = std::sqrt(6.0 / (net.widths_[l] + net.widths_[l + 1]));
      auto w = net.weight(l);
      for (Eigen::Index j = 0; j < w.cols(); ++j)
        for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = uniform(rng, -limit, limit);
    }
    return net;
  }

  const std::vector<int>& widths() const { return widths_; }
  int num_layers() const { return static_cast<int>(widths_.size()) - 1; }
  int input_dim() const { return widths_.front(); }
  int output_dim() const { return widths_.back(); }
  Eigen::Index num_params() const { return params_.size(); }

  const Vector& params() const { return params_; }
  Vector& params() { return params_; }
  void set_params(const Vector& p) {
    if (p.size() != params_.size()) throw std::invalid_argument("Mlp::set_params: size mismatch");
    params_ = p;
  }

  Eigen::Map<const Matrix> weight(int l) const { return {params_.data() + offsets_[l], widths_[l + 1], widths_[l]}; }
  Eigen::Map<Matrix> weight(int l) { return {params_.data() + offsets_[l], widths_[l + 1], widths_[l]}; }
  Eigen::Map<const Vector> bias(int l) const { return {params_.data() + bias_offset(l), widths_[l + 1]}; }
  Eigen::Map<Vector> bias(int l) { return {params_.data() + bias_offset(l), widths_[l + 1]}; }

  Matrix forward(const Matrix& x) const {
    check_input(x);
    Matrix a = x;
    for (int l = 0; l < num_layers(); ++l) {
      Matrix z = weight(l) * a;
      z.colwise() += bias(l);
      if (l + 1 < num_layers()) z = z.cwiseMax(0.0);
      a = std::move(z);
    }
    return a;
  }

  Matrix forward(const Matrix& x, Tape& tape) const {
    check_input(x);
    tape.inputs.resize(num_layers());
    tape.inputs[0] = x;
    for (int l = 0; l < num_layers(); ++l) {
      Matrix z = weight(l) * tape.inputs[l];
      z.colwise() += bias(l);
      if (l + 1 < num_layers())
        tape.inputs[l + 1] = z.cwiseMax(0.0);
      else
        tape.output = std::move(z);
    }
    return tape.output;
  }

  /// Backpropagates dL/d(output). Adds dL/d(params) into `grad` (resized and
  /// zeroed if empty) and returns dL/d(input).
  Matrix backward(const Tape& tape, const Matrix& grad_out, Vector& grad) const {
    if (grad.size() == 0) grad = Vector::Zero(num_params());
    if (grad.size() != num_params()) throw std::invalid_argument("Mlp::backward: gradient buffer size mismatch");
    if (grad_out.rows() != output_dim() || grad_out.cols() != tape.output.cols())
      throw std::invalid_argument("Mlp::backward: output gradient shape mismatch");
    Matrix g = grad_out;
    for (int l = num_layers() - 1; l >= 0; --l) {
      const Matrix& in = tape.inputs[l];
      Eigen::Map<Matrix>(grad.data() + offsets_[l], widths_[l + 1], widths_[l]).noalias() += g * in.transpose();
      Eigen::Map<Vector>(grad.data() + bias_offset(l), widths_[l + 1]) += g.rowwise().sum();
      Matrix g_in = weight(l).transpose() * g;
      if (l > 0) g_in = g_in.cwiseProduct((in.array() > 0.0).cast<double>().matrix());
      g = std::move(g_in);
    }
    return g;
  }

  /// Directional derivative of the outputs with respect to the parameters,
  /// d/dε forward(x; params + ε·direction) at ε = 0.
  Matrix jvp(const Matrix& x, const Vector& direction) const {
    check_input(x);
    if (direction.size() != num_params()) throw std::invalid_argument("Mlp::jvp: direction size mismatch");
    Matrix a = x;
    Matrix da = Matrix::Zero(x.rows(), x.cols());
    for (int l = 0; l < num_layers(); ++l) {
      Eigen::Map<const Matrix> dw(direction.data() + offsets_[l], widths_[l + 1], widths_[l]);
      Eigen::Map<const Vector> db(direction.data() + bias_offset(l), widths_[l + 1]);
      Matrix z = weight(l) * a;
      z.colwise() += bias(l);
      Matrix dz = dw * a + weight(l) * da;
      dz.colwise() += db;
      if (l + 1 < num_layers()) {
        const auto mask = (z.array() > 0.0).cast<double>().matrix();
        da = dz.cwiseProduct(mask);
        a = z.cwiseMax(0.0);
      } else {
        da = std::move(dz);
      }
    }
    return da;
  }

 private:
  Eigen::Index bias_offset(int l) const {
    return offsets_[l] + static_cast<Eigen::Index>(widths_[l]) * widths_[l + 1];
  }

  void check_input(const Matrix& x) const {
    if (widths_.empty()) throw std::invalid_argument("Mlp: network has no layers");
    if (x.rows() != input_dim()) {
      std::ostringstream msg;
      msg << "Mlp: input has " << x.rows() << " features, network expects " << input_dim();
      throw std::invalid_argument(msg.str());
    }
  }

  std::vector<int> widths_;
  std::vector<Eigen::Index> offsets_;
  Vector params_;
};

/// Pure forward pass on a (batch × features) or (features) array.
inline DenseArray forward(const Mlp& net, const DenseArray& input) {
  if (input.rank() == 0 || input.rank() > 2) throw std::invalid_argument("forward: input must have rank 1 or 2");
  if (input.shape().back() != static_cast<std::size_t>(net.input_dim())) {
    std::ostringstream msg;
    msg << "forward: input last dimension " << input.shape().back() << " does not match network input width "
        << net.input_dim();
    throw std::invalid_argument(msg.str());
  }
  Matrix out = net.forward(Matrix(input.as_columns()));
  if (input.rank() == 1) return DenseArray::from_vector(out.col(0));
  return DenseArray::from_matrix(out);
}

/// Value and output-gradient of a scalar loss on network outputs.
struct LossAndGrad {
  double value = 0.0;
  Matrix grad;  // dL/d(outputs), same shape as outputs
};

/// Gradient of `loss(outputs)` with respect to every parameter, one array per
/// weight and bias in layer order.
template <class LossFn>
std::vector<DenseArray> gradients(const Mlp& net, const Matrix& input, LossFn&& loss) {
  Mlp::Tape tape;
  const Matrix out = net.forward(input, tape);
  LossAndGrad lg = loss(out);
  if (!std::isfinite(lg.value) || !lg.grad.allFinite())
    throw DivergenceError("gradients: loss is not finite");
  Vector flat;
  net.backward(tape, lg.grad, flat);
  std::vector<DenseArray> arrays;
  Mlp view = net;
  view.set_params(flat);
  for (int l = 0; l < net.num_layers(); ++l) {
    arrays.push_back(DenseArray::from_matrix(view.weight(l).transpose()));
    arrays.push_back(DenseArray::from_vector(view.bias(l)));
  }
  return arrays;
}

}  // namespace metal
