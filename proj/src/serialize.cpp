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

#include "rbev/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace rbev {
namespace {

constexpr char kTensorMagic[8] = {'R', 'B', 'E', 'V', 'T', 'N', 'S', 'R'};
constexpr char kParamMagic[8] = {'R', 'B', 'E', 'V', 'P', 'A', 'R', 'M'};

static_assert(std::endian::native == std::endian::little, "little-endian host required");

void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4)) throw ConfigError("truncated tensor stream");
  return v;
}

void expect_magic(std::istream& is, const char (&magic)[8], const char* what) {
  char buf[8];
  if (!is.read(buf, 8) || std::memcmp(buf, magic, 8) != 0) {
    throw ConfigError(std::string("bad ") + what + " magic");
  }
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kTensorMagic, 8);
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put_u32(os, static_cast<std::uint32_t>(d));
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.size() * sizeof(double)));
}

Tensor read_tensor(std::istream& is) {
  expect_magic(is, kTensorMagic, "tensor");
  const std::uint32_t rank = get_u32(is);
  if (rank > 16) throw ConfigError("tensor rank " + std::to_string(rank) + " too large");
  Shape shape(rank);
  for (auto& d : shape) d = get_u32(is);
  Tensor t(shape);
  if (!is.read(reinterpret_cast<char*>(t.data().data()),
               static_cast<std::streamsize>(t.size() * sizeof(double)))) {
    throw ConfigError("truncated tensor payload for shape " + shape_str(shape));
  }
  return t;
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + path);
  write_tensor(os, t);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read " + path);
  return read_tensor(is);
}

void save_params(const std::string& path, const ParameterSet& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + path);
  os.write(kParamMagic, 8);
  put_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const Parameter& p : params) {
    put_u32(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    const char flag = p.learnable ? 1 : 0;
    os.write(&flag, 1);
    write_tensor(os, p.tensor);
  }
}

void load_params_into(const std::string& path, ParameterSet& params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read " + path);
  expect_magic(is, kParamMagic, "parameter file");
  const std::uint32_t count = get_u32(is);
  if (count != params.size()) {
    throw ConfigError(path + ": holds " + std::to_string(count) + " parameters, model has " +
                      std::to_string(params.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = get_u32(is);
    if (len > 4096) throw ConfigError(path + ": corrupt parameter name");
    std::string name(len, '\0');
    char flag = 0;
    if (!is.read(name.data(), len) || !is.read(&flag, 1)) throw ConfigError(path + ": truncated");
    Tensor t = read_tensor(is);
    Parameter& p = params.get(name);
    if (t.shape() != p.tensor.shape()) {
      throw ConfigError(path + ": parameter '" + name + "' has shape " + shape_str(t.shape()) +
                        ", model expects " + shape_str(p.tensor.shape()));
    }
    p.tensor = std::move(t);
  }
}

}  // namespace rbev
