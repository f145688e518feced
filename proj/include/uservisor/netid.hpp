// Licensed to the Apache Software Foundation (ASF) under one
// or more contributor license agreements.  See the NOTICE file
// distributed with this work for additional information
// regarding copyright ownership.  The ASF licenses this file
// to you under the Apache License, Version 2.0 (the
// "License"); you may not use this file except in compliance
// with the License.  You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef USERVISOR_NETID_HPP
#define USERVISOR_NETID_HPP

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "uservisor/executor.hpp"
#include "uservisor/ident2.hpp"
#include "uservisor/net.hpp"
#include "uservisor/policy.hpp"

namespace uservisor {

using PacketRef = std::uint64_t;


// A queued packet. `flow` is oriented connector -> listener: the endpoint is
// the source of the packet and the far end its destination.
struct PacketEvent
{
  ConnTuple flow;
  bool is_flow_initial = false;
  // TCP FIN or RST seen on an established flow.
  bool closes_flow = false;
  Timestamp arrival{0};
  PacketRef packet_ref = 0;
};


enum class VerdictAction
{
  Accept,
  // Dropped with an ICMP destination-unreachable toward the connector.
  DropNotify,
  // Dropped without any signal; the connector may retry.
  DropSilent,
};

std::string_view to_string(VerdictAction action);


enum class Admission
{
  Bypassed,
  Enqueued,
  DroppedOverflow,
};

std::string_view to_string(Admission admission);


// Where packets come from and where verdicts go.
class PacketQueueBackend
{
public:
  virtual ~PacketQueueBackend() = default;

  virtual void deliver_verdict(PacketRef packet, VerdictAction action) = 0;

  // ICMP destination-unreachable, administratively prohibited, toward the
  // connector of `flow`.
  virtual void send_unreachable(const ConnTuple& flow) = 0;
};


// Accepted flows. Lookups match either direction of a flow.
class ConntrackTable
{
public:
  explicit ConntrackTable(Duration udp_ttl) : udp_ttl_(udp_ttl) {}

  void insert(const ConnTuple& flow, Timestamp now);

  // Refreshes last_seen on a hit.
  bool touch(const ConnTuple& flow, Timestamp now);

  bool contains(const ConnTuple& flow) const;

  // A closed TCP flow stays until the next gc, but no longer admits a fresh
  // flow-initial packet.
  void mark_closed(const ConnTuple& flow);
  bool is_closed(const ConnTuple& flow) const;

  void erase(const ConnTuple& flow);

  // Drops UDP flows idle longer than udp_ttl and closed TCP flows.
  std::size_t gc(Timestamp now);

  std::size_t size() const { return entries_.size(); }
  Duration udp_ttl() const { return udp_ttl_; }

private:
  struct Entry
  {
    Timestamp last_seen;
    bool closed = false;
  };

  static ConnTuple canonical(const ConnTuple& flow);

  Duration udp_ttl_;
  std::unordered_map<ConnTuple, Entry> entries_;
};


struct NetidConfig
{
  PolicyConfig policy;
  std::size_t queue_capacity = 1024;
  Duration udp_ttl = std::chrono::seconds(30);
  std::uint64_t seed = 0x9e7;
};


// Adjudication latency histogram, bucket upper bounds in microseconds.
class LatencyHistogram
{
public:
  static constexpr std::array<std::uint64_t, 13> kBoundsUs = {
      50, 100, 250, 500, 1000, 2500, 5000, 10000, 25000, 50000, 100000,
      250000, 500000};

  void record(Duration latency);

  std::uint64_t count() const { return count_; }
  Duration total() const { return total_; }
  Duration max() const { return max_; }
  nlohmann::ordered_json to_json() const;

private:
  std::array<std::uint64_t, kBoundsUs.size() + 1> buckets_{};
  std::uint64_t count_ = 0;
  Duration total_{0};
  Duration max_{0};
};


struct NetidMetrics
{
  std::uint64_t packets = 0;
  std::uint64_t bypassed = 0;
  std::uint64_t adjudications = 0;
  std::uint64_t overflow_drops = 0;
  std::uint64_t unreachable_sent = 0;
  std::uint64_t held_packets = 0;
  std::uint64_t timeouts = 0;
  std::uint64_t lookup_failures = 0;
  std::uint64_t single_reply_accepts = 0;
  std::size_t max_pending = 0;
  std::map<VerdictAction, std::uint64_t> by_action;
  std::map<Reason, std::uint64_t> by_reason;
  LatencyHistogram latency;

  nlohmann::ordered_json to_json() const;
};


// Result of one finished adjudication, for observers.
struct VerdictRecord
{
  ConnTuple flow;
  VerdictAction action = VerdictAction::DropSilent;
  std::optional<Reason> reason;
  std::optional<Identity> connector;
  std::optional<Identity> listener;
  Timestamp arrival{0};
  Timestamp decided{0};
};


// The verdict engine. Confined to its executor.
class Netid
{
public:
  using VerdictObserver = std::function<void(const VerdictRecord&)>;

  Netid(
      Executor& executor,
      NetidConfig config,
      Ident2Client& ident2,
      PacketQueueBackend& queue);

  ~Netid();

  Netid(const Netid&) = delete;
  Netid& operator=(const Netid&) = delete;

  // Intake. Never waits on an adjudication.
  Admission on_packet(const PacketEvent& event);

  std::size_t conntrack_gc(Timestamp now);

  // Every pending adjudication ends as DropSilent.
  void shutdown();

  void set_observer(VerdictObserver observer) { observer_ = std::move(observer); }

  std::size_t pending() const { return pending_.size(); }
  const NetidMetrics& metrics() const { return metrics_; }
  const ConntrackTable& conntrack() const { return conntrack_; }
  const NetidConfig& config() const { return config_; }

private:
  struct Pending
  {
    std::uint64_t id;
    PacketEvent first;
    std::vector<PacketRef> held;
    std::optional<Identity> connector;
    std::optional<Identity> listener;
    TimerId deadline = 0;
  };

  void start_adjudication(const PacketEvent& event);
  void on_reply(std::uint64_t id, Role role, const wire::Reply& reply);
  void finish(std::uint64_t id, VerdictAction action, std::optional<Reason> reason);
  void emit_unreachable(const ConnTuple& flow);

  Executor& executor_;
  NetidConfig config_;
  Ident2Client& ident2_;
  PacketQueueBackend& queue_;
  ConntrackTable conntrack_;
  std::mt19937_64 rng_;
  std::uint64_t next_id_ = 1;
  std::unordered_map<std::uint64_t, Pending> pending_;
  // Canonical flow -> pending adjudication id.
  std::unordered_map<ConnTuple, std::uint64_t> pending_by_flow_;
  NetidMetrics metrics_;
  VerdictObserver observer_;
  std::shared_ptr<bool> alive_ = std::make_shared<bool>(true);
};

} // namespace uservisor

#endif // USERVISOR_NETID_HPP
