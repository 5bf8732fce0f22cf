#pragma once

#include "watchped/episode.hpp"
#include "watchped/processing.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace watchped {

struct SensorPacket {
  std::int64_t sequence_number = 0;
  std::string pedestrian_id;  // opaque, carries no identity
  std::vector<SensorSample> samples;
  std::optional<GpsSample> gps;
  TimestampMs send_timestamp_ms = 0;
  friend bool operator==(const SensorPacket&, const SensorPacket&) = default;
};

struct ChannelConfig {
  double base_latency_ms = 0;
  double jitter_ms = 0;  // half-width of the uniform delay perturbation
  double loss_probability = 0;
  std::uint64_t seed = 0;
  /// Watch-to-vehicle clock offset added to delivered timestamps; 0 (default) disables it.
  double clock_skew_ms = 0;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static ChannelConfig from_json(const nlohmann::json& j);
  static ChannelConfig load(const std::filesystem::path& path);
};

struct DeliveredPacket {
  SensorPacket packet;
  double arrival_ms = 0;
};

/// Splits the stream into batches of `batch_size`; sequence numbers start at 0. Each packet is sent
/// at its last sample's time and carries the newest GPS fix not later than that, if one is unsent.
std::vector<SensorPacket> packetize(const std::vector<SensorSample>& stream, const std::vector<GpsSample>& gps,
                                    int batch_size, const std::string& pedestrian_id = "anon");

/// Independent Bernoulli loss, then delay base + U(-jitter, +jitter) (never negative). Output is in
/// arrival order, ties broken by sequence number.
std::vector<DeliveredPacket> transmit(const std::vector<SensorPacket>& packets, const ChannelConfig& cfg);

struct ResyncStats {
  double delivered_fraction = 0;  // unique packets received / packets expected
  double max_staleness_ms = 0;    // worst age of the newest received sample, over frames
  std::int64_t gap_count = 0;     // missing sequence numbers
  std::size_t stale_frames = 0;   // frames whose nearest reconstructed sample is beyond tolerance
  std::int64_t packets_received = 0;
  std::int64_t packets_expected = 0;
};

struct ResyncResult {
  std::vector<SensorSample> stream;  // strictly increasing timestamps
  std::vector<GpsSample> gps;
  SyncResult sync;
  ResyncStats stats;
};

/// Rebuilds the sensor stream at the vehicle. `sent_packets` lets the caller state how many packets
/// were sent; otherwise the count is inferred from the highest sequence number seen.
ResyncResult receive_resync(const std::vector<DeliveredPacket>& delivered, const std::vector<TimestampMs>& frame_ts,
                            TimestampMs tolerance_ms, std::optional<std::int64_t> sent_packets = std::nullopt);

/// What the vehicle holds at time `now_ms`: samples and fixes from packets arrived by then.
struct ReceiverView {
  std::vector<SensorSample> stream;
  std::vector<GpsSample> gps;
};
ReceiverView received_by(const std::vector<DeliveredPacket>& delivered, double now_ms);

/// Model input for frame t built only from data the vehicle has received by that frame's time:
/// the sensor window ends at the newest received sample and direction uses the received GPS.
ModelInput causal_window(const Episode& episode, const std::vector<DeliveredPacket>& delivered, int t,
                         const WindowConfig& cfg);

void write_stats_csv(const std::filesystem::path& path, const std::vector<std::pair<std::string, ResyncStats>>& rows);

}  // namespace watchped
