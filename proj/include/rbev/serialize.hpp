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

#include <iosfwd>
#include <string>

#include "rbev/autodiff.hpp"

namespace rbev {

// Binary tensor block: "RBEVTNSR", u32 rank, u32 dims[rank], f64 payload; all
// little-endian.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

// Parameter container: "RBEVPARM", u32 count, then per parameter u32 name
// length, name bytes, u8 learnable, tensor block.
void save_params(const std::string& path, const ParameterSet& params);
// Loads values into an existing set; names and shapes must match.
void load_params_into(const std::string& path, ParameterSet& params);

}  // namespace rbev
