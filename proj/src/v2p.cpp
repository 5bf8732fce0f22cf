#include "watchped/v2p.hpp"

#include "watchped/csv.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <tuple>

namespace watchped {
namespace {

template <typename T>
void sort_unique_by_time(std::vector<T>& v) {
  std::stable_sort(v.begin(), v.end(), [](const T& a, const T& b) { return a.timestamp_ms < b.timestamp_ms; });
  v.erase(std::unique(v.begin(), v.end(), [](const T& a, const T& b) { return a.timestamp_ms == b.timestamp_ms; }), v.end());
}

ReceiverView collect(const std::vector<DeliveredPacket>& delivered, double now_ms) {
  ReceiverView view;
  std::set<std::int64_t> seen;
  for (const auto& d : delivered) {
    if (d.arrival_ms > now_ms || !seen.insert(d.packet.sequence_number).second) continue;
    view.stream.insert(view.stream.end(), d.packet.samples.begin(), d.packet.samples.end());
    if (d.packet.gps) view.gps.push_back(*d.packet.gps);
  }
  sort_unique_by_time(view.stream);
  sort_unique_by_time(view.gps);
  return view;
}

}  // namespace

void ChannelConfig::validate() const {
  if (!(base_latency_ms >= 0) || !std::isfinite(base_latency_ms)) throw std::invalid_argument("base_latency_ms must be >= 0");
  if (!(jitter_ms >= 0) || !std::isfinite(jitter_ms)) throw std::invalid_argument("jitter_ms must be >= 0");
  if (!(loss_probability >= 0 && loss_probability < 1)) throw std::invalid_argument("loss_probability must be in [0, 1)");
  if (!std::isfinite(clock_skew_ms)) throw std::invalid_argument("clock_skew_ms must be finite");
}

nlohmann::ordered_json ChannelConfig::to_json() const {
  nlohmann::ordered_json j;
  j["base_latency_ms"] = base_latency_ms;
  j["jitter_ms"] = jitter_ms;
  j["loss_probability"] = loss_probability;
  j["seed"] = seed;
  if (clock_skew_ms != 0) j["clock_skew_ms"] = clock_skew_ms;
  return j;
}

ChannelConfig ChannelConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("channel config must be a JSON object");
  ChannelConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "base_latency_ms") {
      c.base_latency_ms = value.get<double>();
    } else if (key == "jitter_ms") {
      c.jitter_ms = value.get<double>();
    } else if (key == "loss_probability") {
      c.loss_probability = value.get<double>();
    } else if (key == "seed") {
      c.seed = value.get<std::uint64_t>();
    } else if (key == "clock_skew_ms") {
      c.clock_skew_ms = value.get<double>();
    } else {
      throw std::invalid_argument("unknown channel config key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

ChannelConfig ChannelConfig::load(const std::filesystem::path& path) {
  try {
    return from_json(nlohmann::json::parse(read_text_file(path)));
  } catch (const ParseError&) {
    throw;
  } catch (const std::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

std::vector<SensorPacket> packetize(const std::vector<SensorSample>& stream, const std::vector<GpsSample>& gps,
                                    int batch_size, const std::string& pedestrian_id) {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be at least 1");
  std::vector<SensorPacket> out;
  std::size_t next_fix = 0;
  const auto n = static_cast<std::size_t>(batch_size);
  for (std::size_t begin = 0; begin < stream.size(); begin += n) {
    SensorPacket p;
    p.sequence_number = static_cast<std::int64_t>(out.size());
    p.pedestrian_id = pedestrian_id;
    p.samples.assign(stream.begin() + static_cast<std::ptrdiff_t>(begin),
                     stream.begin() + static_cast<std::ptrdiff_t>(std::min(begin + n, stream.size())));
    p.send_timestamp_ms = p.samples.back().timestamp_ms;
    std::size_t j = next_fix;
    while (j < gps.size() && gps[j].timestamp_ms <= p.send_timestamp_ms) ++j;
    if (j > next_fix) {
      p.gps = gps[j - 1];
      next_fix = j;
    }
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<DeliveredPacket> transmit(const std::vector<SensorPacket>& packets, const ChannelConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  // Virtual-clock event queue keyed by (arrival, sequence number).
  using Event = std::tuple<double, std::int64_t, std::size_t>;
  std::priority_queue<Event, std::vector<Event>, std::greater<>> queue;
  for (std::size_t i = 0; i < packets.size(); ++i) {
    const double u_loss = unit(rng);
    const double u_delay = 2 * unit(rng) - 1;
    if (u_loss < cfg.loss_probability) continue;
    const double delay = std::max(0.0, cfg.base_latency_ms + cfg.jitter_ms * u_delay);
    queue.emplace(static_cast<double>(packets[i].send_timestamp_ms) + delay, packets[i].sequence_number, i);
  }
  const auto skew = static_cast<TimestampMs>(std::llround(cfg.clock_skew_ms));
  std::vector<DeliveredPacket> out;
  while (!queue.empty()) {
    const auto [arrival, seq, i] = queue.top();
    queue.pop();
    DeliveredPacket d{packets[i], arrival};
    if (skew != 0) {
      for (auto& s : d.packet.samples) s.timestamp_ms += skew;
      if (d.packet.gps) d.packet.gps->timestamp_ms += skew;
    }
    out.push_back(std::move(d));
  }
  return out;
}

ReceiverView received_by(const std::vector<DeliveredPacket>& delivered, double now_ms) {
  return collect(delivered, now_ms);
}

ResyncResult receive_resync(const std::vector<DeliveredPacket>& delivered, const std::vector<TimestampMs>& frame_ts,
                            TimestampMs tolerance_ms, std::optional<std::int64_t> sent_packets) {
  ResyncResult r;
  ReceiverView all = collect(delivered, std::numeric_limits<double>::infinity());
  r.stream = std::move(all.stream);
  r.gps = std::move(all.gps);
  r.sync = sync_sensor_lenient(r.stream, frame_ts, tolerance_ms);

  std::set<std::int64_t> seqs;
  for (const auto& d : delivered) seqs.insert(d.packet.sequence_number);
  const std::int64_t expected = sent_packets.value_or(seqs.empty() ? 0 : *seqs.rbegin() + 1);
  const auto received = static_cast<std::int64_t>(
      std::count_if(seqs.begin(), seqs.end(), [&](std::int64_t s) { return s >= 0 && s < expected; }));
  r.stats.packets_expected = expected;
  r.stats.packets_received = received;
  r.stats.gap_count = expected - received;
  r.stats.delivered_fraction = expected > 0 ? static_cast<double>(received) / static_cast<double>(expected) : 1.0;
  r.stats.stale_frames = r.sync.stale_count();

  // Arrival sweep: age of the newest sample on hand at each frame time.
  std::vector<const DeliveredPacket*> by_arrival;
  for (const auto& d : delivered) by_arrival.push_back(&d);
  std::stable_sort(by_arrival.begin(), by_arrival.end(),
                   [](const DeliveredPacket* a, const DeliveredPacket* b) { return a->arrival_ms < b->arrival_ms; });
  std::size_t next = 0;
  std::optional<TimestampMs> newest;
  for (TimestampMs t : frame_ts) {
    while (next < by_arrival.size() && by_arrival[next]->arrival_ms <= static_cast<double>(t)) {
      for (const auto& s : by_arrival[next]->packet.samples) newest = std::max(newest.value_or(s.timestamp_ms), s.timestamp_ms);
      ++next;
    }
    if (newest) r.stats.max_staleness_ms = std::max(r.stats.max_staleness_ms, static_cast<double>(t - *newest));
  }
  return r;
}

ModelInput causal_window(const Episode& e, const std::vector<DeliveredPacket>& delivered, int t, const WindowConfig& cfg) {
  ModelInput in = build_window(e, t, cfg);
  const ReceiverView view = received_by(delivered, static_cast<double>(e.frame_timestamp(t)));
  if (view.stream.size() < static_cast<std::size_t>(cfg.sensor_window)) {
    throw WindowError("only " + std::to_string(view.stream.size()) + " sensor samples received by frame " + std::to_string(t));
  }
  in.sensor = sensor_window_ending(view.stream, view.stream.size() - 1, cfg.sensor_window);
  std::vector<TimestampMs> ts;
  std::vector<std::optional<BBox>> boxes;
  for (int f = in.first_frame; f <= t; ++f) {
    ts.push_back(e.frame_timestamp(f));
    const BBox* b = e.bbox_at(f);
    boxes.push_back(b ? std::optional<BBox>(*b) : std::nullopt);
  }
  in.direction = direction_features(view.gps, boxes, ts);
  return in;
}

void write_stats_csv(const std::filesystem::path& path, const std::vector<std::pair<std::string, ResyncStats>>& rows) {
  std::ostringstream out;
  out << "id,delivered_fraction,max_staleness_ms,gap_count,stale_frames,packets_received,packets_expected\n";
  for (const auto& [id, s] : rows) {
    out << id << ',' << format_fixed(s.delivered_fraction, 6) << ',' << format_fixed(s.max_staleness_ms, 6) << ','
        << s.gap_count << ',' << s.stale_frames << ',' << s.packets_received << ',' << s.packets_expected << '\n';
  }
  write_text_file(path, out.str());
}

}  // namespace watchped
