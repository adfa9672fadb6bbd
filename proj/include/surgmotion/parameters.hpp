#pragma once

#include "surgmotion/types.hpp"

#include <Eigen/Core>

#include <string>
#include <vector>

namespace surgmotion {

/// A named matrix-shaped slice of the flat parameter buffer.
struct ParamBlock {
  std::string name;
  Eigen::Index offset = 0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;

  Eigen::Index size() const { return rows * cols; }
};

/// Flat storage for every optimizable parameter with a gradient buffer of the
/// same shape. Blocks are column-major views into the flat buffers and keep the
/// order they were added in.
template <typename Scalar>
class ParameterStore {
 public:
  using MatrixMap = Eigen::Map<Matrix<Scalar>>;
  using ConstMatrixMap = Eigen::Map<const Matrix<Scalar>>;

  int add(std::string name, Eigen::Index rows, Eigen::Index cols) {
    ParamBlock block{std::move(name), values_.size(), rows, cols};
    const Eigen::Index total = values_.size() + block.size();
    values_.conservativeResize(total);
    grads_.conservativeResize(total);
    values_.tail(block.size()).setZero();
    grads_.tail(block.size()).setZero();
    blocks_.push_back(std::move(block));
    return static_cast<int>(blocks_.size()) - 1;
  }

  MatrixMap value(int id) { return {values_.data() + blocks_[id].offset, blocks_[id].rows, blocks_[id].cols}; }
  ConstMatrixMap value(int id) const {
    return {values_.data() + blocks_[id].offset, blocks_[id].rows, blocks_[id].cols};
  }
  MatrixMap grad(int id) { return {grads_.data() + blocks_[id].offset, blocks_[id].rows, blocks_[id].cols}; }
  ConstMatrixMap grad(int id) const {
    return {grads_.data() + blocks_[id].offset, blocks_[id].rows, blocks_[id].cols};
  }

  Vector<Scalar>& values() { return values_; }
  const Vector<Scalar>& values() const { return values_; }
  Vector<Scalar>& grads() { return grads_; }
  const Vector<Scalar>& grads() const { return grads_; }

  void zero_grads() { grads_.setZero(); }

  Eigen::Index size() const { return values_.size(); }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }

 private:
  Vector<Scalar> values_;
  Vector<Scalar> grads_;
  std::vector<ParamBlock> blocks_;
};

}  // namespace surgmotion
