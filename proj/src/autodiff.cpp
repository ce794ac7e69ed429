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

#include "rbev/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace rbev {

ParamId ParameterSet::add(std::string name, Tensor init, bool learnable) {
  if (index_.count(name)) {
    throw ConfigError("duplicate parameter name '" + name + "'");
  }
  const ParamId id = params_.size();
  index_.emplace(name, id);
  Parameter p;
  p.name = std::move(name);
  p.grad = Tensor(init.shape());
  p.tensor = std::move(init);
  p.learnable = learnable;
  params_.push_back(std::move(p));
  return id;
}

ParamId ParameterSet::id_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

Parameter& ParameterSet::get(const std::string& name) { return params_[id_of(name)]; }
const Parameter& ParameterSet::get(const std::string& name) const {
  return params_[id_of(name)];
}

std::size_t ParameterSet::numel() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.size();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) {
    if (p.grad.shape() != p.tensor.shape()) p.grad = Tensor(p.tensor.shape());
    p.grad.fill(0.0);
  }
}

const Tensor& Var::value() const { return tape->value(*this); }
const Shape& Var::shape() const { return tape->value(*this).shape(); }
bool Var::requires_grad() const { return tape->requires_grad(*this); }

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::param(ParameterSet& set, ParamId id) {
  auto key = std::make_pair(static_cast<const ParameterSet*>(&set), id);
  if (auto it = bound_.find(key); it != bound_.end()) return Var{this, it->second};
  Parameter& p = set[id];
  Node n;
  n.value = p.tensor;
  n.requires_grad = grad_enabled() && p.learnable;
  if (n.requires_grad) n.param = &p;
  nodes_.push_back(std::move(n));
  const auto vid = static_cast<std::uint32_t>(nodes_.size() - 1);
  bound_.emplace(key, vid);
  return Var{this, vid};
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
  Node n;
  n.value = std::move(value);
  if (grad_enabled()) {
    for (const Var& v : inputs) {
      if (nodes_[v.id].requires_grad) {
        n.requires_grad = true;
        break;
      }
    }
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Tensor& Tape::grad(Var v) {
  Node& n = nodes_[v.id];
  if (n.grad.shape() != n.value.shape() || n.grad.size() != n.value.size()) {
    n.grad = Tensor(n.value.shape());
  }
  return n.grad;
}

void Tape::backward(Var out) {
  if (value(out).size() != 1) {
    throw DimensionError("backward() requires a scalar output, got " +
                         shape_str(value(out).shape()));
  }
  if (!nodes_[out.id].requires_grad) return;
  grad(out)[0] += 1.0;
  for (std::int64_t i = out.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) {
      // Reverse order guarantees this node receives no further gradient.
      const Tensor g = std::move(n.grad);
      n.grad = Tensor();
      n.backward(*this, g);
    } else if (n.param != nullptr) {
      auto dst = n.param->grad.data();
      auto src = n.grad.data();
      if (dst.size() != src.size()) {
        n.param->grad = Tensor(n.param->tensor.shape());
        dst = n.param->grad.data();
      }
      for (std::size_t k = 0; k < src.size(); ++k) dst[k] += src[k];
    }
  }
}

double relative_error(double analytic, double numeric, double abs_floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), abs_floor});
  return std::abs(analytic - numeric) / denom;
}

namespace {

double eval_scalar(const ScalarFn& f, ParameterSet& params) {
  Tape tape(Tape::Mode::kNoGrad);
  return f(tape, params).value().item();
}

}  // namespace

GradCheckReport grad_check(const ScalarFn& f, ParameterSet& params,
                           const GradCheckOptions& options) {
  if (!(options.eps > 0.0)) throw ConfigError("grad_check: eps must be positive");

  params.zero_grad();
  double floor = options.abs_floor;
  {
    Tape tape;
    Var out = f(tape, params);
    const double v = out.value().item();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite value at base point");
    floor *= std::max(1.0, std::abs(v));
    tape.backward(out);
  }

  GradCheckReport report;
  for (auto& p : params) {
    if (!p.learnable) continue;
    if (!options.only.empty() &&
        std::find(options.only.begin(), options.only.end(), p.name) == options.only.end()) {
      continue;
    }
    GradCheckEntry entry;
    entry.name = p.name;
    const std::size_t n = p.tensor.size();
    std::size_t stride = 1;
    if (options.max_elements_per_param > 0 && n > options.max_elements_per_param) {
      stride = (n + options.max_elements_per_param - 1) / options.max_elements_per_param;
    }
    for (std::size_t k = 0; k < n; k += stride) {
      const double saved = p.tensor[k];
      p.tensor[k] = saved + options.eps;
      const double fp = eval_scalar(f, params);
      p.tensor[k] = saved - options.eps;
      const double fm = eval_scalar(f, params);
      p.tensor[k] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        std::ostringstream os;
        os << "grad_check: non-finite value perturbing " << p.name << "[" << k << "] by +/-"
           << options.eps;
        throw NumericError(os.str());
      }
      const double numeric = (fp - fm) / (2.0 * options.eps);
      const double analytic = p.grad[k];
      const double err = relative_error(analytic, numeric, floor);
      ++entry.checked;
      if (entry.checked == 1 || err > entry.max_rel_error) {
        entry.max_rel_error = err;
        entry.worst_index = k;
        entry.analytic_at_worst = analytic;
        entry.numeric_at_worst = numeric;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  }
  report.passed = report.max_rel_error <= options.tol;
  return report;
}

}  // namespace rbev
