#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "caan/errors.hpp"
#include "caan/tensor.hpp"

// Model parameter files: magic "CAAN", version u32 LE, then repeated records
// of (name length u32, UTF-8 name, rank u32, dims u32 x rank, f32 LE values
// row-major) until end of file.

namespace caan {

constexpr std::uint32_t kModelVersion = 1;

struct ParamRecord {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

using ParamFile = std::vector<ParamRecord>;

void write_params(const ParamFile& params, const std::string& path);
ParamFile read_params(const std::string& path);

// Helpers for scalar metadata stored as rank-1 records.
ParamRecord meta_record(const std::string& name, const std::vector<float>& vals);
const ParamRecord& find_param(const ParamFile& file, const std::string& name);
const ParamRecord* find_param_opt(const ParamFile& file, const std::string& name);

}  // namespace caan
