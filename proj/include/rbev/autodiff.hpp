// Copyright 2026 The rbev Authors. All Rights Reserved.
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

#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "rbev/tensor.hpp"

namespace rbev {

struct Parameter {
  std::string name;
  Tensor tensor;
  Tensor grad;
  bool learnable = true;
};

using ParamId = std::size_t;

// Named parameter collection. Names are unique; ids are stable for the
// lifetime of the set.
class ParameterSet {
 public:
  ParamId add(std::string name, Tensor init, bool learnable = true);

  Parameter& operator[](ParamId id) { return params_[id]; }
  const Parameter& operator[](ParamId id) const { return params_[id]; }
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  ParamId id_of(const std::string& name) const;

  std::size_t size() const { return params_.size(); }
  std::size_t numel() const;
  void zero_grad();

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::deque<Parameter> params_;
  std::map<std::string, ParamId> index_;
};

class Tape;

// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const;
  bool requires_grad() const;
};

// Records differentiable operations in execution order and replays them in
// reverse to accumulate gradients. Single-threaded; one tape per pass.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& out_grad)>;

  enum class Mode { kGrad, kNoGrad };

  explicit Tape(Mode mode = Mode::kGrad) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var param(ParameterSet& set, ParamId id);

  // Low-level entry used by op implementations. `backward` is dropped when no
  // input requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  // Gradient buffer of `v`, allocated on first access. Only meaningful for
  // nodes that require a gradient.
  Tensor& grad(Var v);

  // Seeds d(out)/d(out) = 1 for a scalar output and propagates. Gradients of
  // bound parameters are added into Parameter::grad.
  void backward(Var out);

  std::size_t size() const { return nodes_.size(); }
  bool grad_enabled() const { return mode_ == Mode::kGrad; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Backward backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  std::map<std::pair<const ParameterSet*, ParamId>, std::uint32_t> bound_;
  Mode mode_;
};

// Central-difference check of reverse-mode gradients.
struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  std::size_t worst_index = 0;
  double max_rel_error = 0.0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  bool passed = true;
};

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  // Gradients smaller than abs_floor * max(1, |f|) are compared absolutely.
  // The difference quotient carries round-off proportional to |f| (~1e-9 for
  // an O(10) loss at eps = 1e-5), so smaller components cannot be resolved.
  double abs_floor = 1e-5;
  // 0 checks every element; otherwise an evenly strided subset.
  std::size_t max_elements_per_param = 0;
  std::vector<std::string> only;  // empty = all learnable parameters
};

using ScalarFn = std::function<Var(Tape&, ParameterSet&)>;

GradCheckReport grad_check(const ScalarFn& f, ParameterSet& params,
                           const GradCheckOptions& options = {});

double relative_error(double analytic, double numeric, double abs_floor);

}  // namespace rbev
