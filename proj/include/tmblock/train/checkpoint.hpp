#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "tmblock/net/network.hpp"

namespace tmb::train {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Little-endian container:
///   "TMBCKPT\0", u32 version, u64 seed, u64 config length, config text,
///   u64 record count, then per record: u32 name length, name, u32 rank,
///   u64 dims[rank], f64 data[prod(dims)].
/// Parameters come first in network order, then per BN layer the records
/// <name>.running_mean, <name>.running_var and <name>.initialized.
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(net::Network& net);
void save_checkpoint(net::Network& net, const std::filesystem::path& path);

/// Rebuilds the network from the embedded config and fills in every record.
net::Network deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);
net::Network load_checkpoint(const std::filesystem::path& path);

/// Loads records into an existing network; the first record whose name or
/// shape disagrees is reported.
void load_checkpoint_into(net::Network& net, const std::filesystem::path& path);
void deserialize_checkpoint_into(net::Network& net, const std::vector<std::uint8_t>& bytes);

/// In-memory copy of every parameter and BN statistic.
struct NetworkState {
  std::vector<std::vector<double>> params;
  std::vector<std::vector<double>> running_mean;
  std::vector<std::vector<double>> running_var;
  std::vector<bool> initialized;
};
NetworkState capture_state(net::Network& net);
void restore_state(net::Network& net, const NetworkState& state);

}  // namespace tmb::train
