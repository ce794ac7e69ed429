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

#include <cmath>
#include <string>

#include "rbev/autodiff.hpp"
#include "rbev/rng.hpp"

namespace rbev {

// Glorot-uniform draw for a weight with the given fan-in / fan-out.
inline Tensor glorot(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  Tensor t(std::move(shape));
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : t.data()) v = uniform(rng, -a, a);
  return t;
}

inline ParamId add_dense(ParameterSet& ps, const std::string& prefix, std::size_t in,
                         std::size_t out, Rng& rng) {
  const ParamId w = ps.add(prefix + ".w", glorot({in, out}, in, out, rng));
  ps.add(prefix + ".b", Tensor(Shape{out}));
  return w;
}

inline void add_norm(ParameterSet& ps, const std::string& prefix, std::size_t channels) {
  ps.add(prefix + ".g", Tensor(Shape{channels}, 1.0));
  ps.add(prefix + ".b", Tensor(Shape{channels}));
}

// Binds a named parameter to the tape.
inline Var pvar(Tape& tape, ParameterSet& ps, const std::string& name) {
  return tape.param(ps, ps.id_of(name));
}

}  // namespace rbev
