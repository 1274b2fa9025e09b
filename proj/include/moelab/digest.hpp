#pragma once

#include <span>
#include <string>

#include "moelab/model.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

/// Lower-case hex SHA-256 of raw bytes.
std::string sha256_hex(std::span<const unsigned char> bytes);
/// SHA-256 of a tensor's shape string and little-endian payload.
std::string tensor_sha256(const Tensor& t);
/// SHA-256 over every base tensor of one routed expert (up then down).
std::string expert_sha256(const MoEModel& model, std::size_t layer, std::size_t expert);

}  // namespace moelab
