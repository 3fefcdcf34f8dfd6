#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "refuel/error.hpp"

namespace refuel {

/// Sizes shared by every table of one episodic problem. Steps are 0-based
/// in code: h runs over [0, horizon).
struct Shape {
  std::size_t horizon = 0;
  std::size_t states = 0;
  std::size_t actions = 0;

  friend bool operator==(const Shape&, const Shape&) = default;

  std::size_t cells() const noexcept { return horizon * states * actions; }
};

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw InputError(msg);
}

/// Dense real table indexed by (h, s, a); row-major.
class StepTable {
 public:
  StepTable() = default;
  explicit StepTable(Shape shape, double fill = 0.0) : shape_(shape), data_(shape.cells(), fill) {}
  StepTable(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
    require(data_.size() == shape_.cells(), "StepTable: data size does not match shape");
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t horizon() const noexcept { return shape_.horizon; }
  std::size_t states() const noexcept { return shape_.states; }
  std::size_t actions() const noexcept { return shape_.actions; }

  double operator()(std::size_t h, std::size_t s, std::size_t a) const noexcept {
    return data_[(h * shape_.states + s) * shape_.actions + a];
  }
  double& operator()(std::size_t h, std::size_t s, std::size_t a) noexcept {
    return data_[(h * shape_.states + s) * shape_.actions + a];
  }

  std::span<const double> row(std::size_t h, std::size_t s) const noexcept {
    return {data_.data() + (h * shape_.states + s) * shape_.actions, shape_.actions};
  }
  std::span<double> row(std::size_t h, std::size_t s) noexcept {
    return {data_.data() + (h * shape_.states + s) * shape_.actions, shape_.actions};
  }

  const std::vector<double>& data() const noexcept { return data_; }

  friend bool operator==(const StepTable&, const StepTable&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Per-step feature map phi_h(s, a) in R^dim.
class FeatureTable {
 public:
  FeatureTable() = default;
  FeatureTable(Shape shape, std::size_t dim) : shape_(shape), dim_(dim), data_(shape.cells() * dim, 0.0) {}
  FeatureTable(Shape shape, std::size_t dim, std::vector<double> data)
      : shape_(shape), dim_(dim), data_(std::move(data)) {
    require(data_.size() == shape_.cells() * dim_, "FeatureTable: data size does not match shape");
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t dim() const noexcept { return dim_; }

  std::span<const double> at(std::size_t h, std::size_t s, std::size_t a) const noexcept {
    return {data_.data() + offset(h, s, a), dim_};
  }
  std::span<double> at(std::size_t h, std::size_t s, std::size_t a) noexcept {
    return {data_.data() + offset(h, s, a), dim_};
  }

  const std::vector<double>& data() const noexcept { return data_; }

  friend bool operator==(const FeatureTable&, const FeatureTable&) = default;

 private:
  std::size_t offset(std::size_t h, std::size_t s, std::size_t a) const noexcept {
    return ((h * shape_.states + s) * shape_.actions + a) * dim_;
  }

  Shape shape_;
  std::size_t dim_ = 0;
  std::vector<double> data_;
};

/// Per-step measure mu_h(s') in R^dim. Column j (fixed h) is a distribution
/// over next states.
class MeasureTable {
 public:
  MeasureTable() = default;
  MeasureTable(std::size_t horizon, std::size_t states, std::size_t dim)
      : horizon_(horizon), states_(states), dim_(dim), data_(horizon * states * dim, 0.0) {}
  MeasureTable(std::size_t horizon, std::size_t states, std::size_t dim, std::vector<double> data)
      : horizon_(horizon), states_(states), dim_(dim), data_(std::move(data)) {
    require(data_.size() == horizon_ * states_ * dim_, "MeasureTable: data size does not match shape");
  }

  std::size_t horizon() const noexcept { return horizon_; }
  std::size_t states() const noexcept { return states_; }
  std::size_t dim() const noexcept { return dim_; }

  std::span<const double> at(std::size_t h, std::size_t s_next) const noexcept {
    return {data_.data() + (h * states_ + s_next) * dim_, dim_};
  }
  std::span<double> at(std::size_t h, std::size_t s_next) noexcept {
    return {data_.data() + (h * states_ + s_next) * dim_, dim_};
  }
  double operator()(std::size_t h, std::size_t s_next, std::size_t j) const noexcept {
    return data_[(h * states_ + s_next) * dim_ + j];
  }
  double& operator()(std::size_t h, std::size_t s_next, std::size_t j) noexcept {
    return data_[(h * states_ + s_next) * dim_ + j];
  }

  const std::vector<double>& data() const noexcept { return data_; }

  friend bool operator==(const MeasureTable&, const MeasureTable&) = default;

 private:
  std::size_t horizon_ = 0;
  std::size_t states_ = 0;
  std::size_t dim_ = 0;
  std::vector<double> data_;
};

}  // namespace refuel
