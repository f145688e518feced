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

#ifndef USERVISOR_SIMNET_HPP
#define USERVISOR_SIMNET_HPP

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "uservisor/executor.hpp"
#include "uservisor/ident2.hpp"
#include "uservisor/introspection.hpp"
#include "uservisor/netid.hpp"
#include "uservisor/policy.hpp"

namespace uservisor::sim {

// In-process datagram fabric between simulated hosts. Datagrams arrive
// after a fixed one-way latency; nothing bound at the destination means
// the datagram is lost.
class SimNetwork
{
public:
  using Receiver =
      std::function<void(std::span<const std::uint8_t>, const Endpoint& source)>;

  SimNetwork(Executor& executor, Duration latency);

  // A socket that sends from `local` and receives what is addressed to it.
  std::shared_ptr<DatagramSocket> bind(const Endpoint& local, Receiver receiver);

  void unbind(const Endpoint& local);

  Duration latency() const { return latency_; }
  std::uint64_t delivered() const { return delivered_; }
  std::uint64_t lost() const { return lost_; }

private:
  class Socket;
  void deliver(const Endpoint& source, const Endpoint& destination,
               std::vector<std::uint8_t> datagram);

  Executor& executor_;
  Duration latency_;
  std::map<Endpoint, Receiver> bound_;
  std::uint64_t delivered_ = 0;
  std::uint64_t lost_ = 0;
};


// Packet-queue backend that records verdicts and unreachable signals.
class SimPacketQueue final : public PacketQueueBackend
{
public:
  void deliver_verdict(PacketRef packet, VerdictAction action) override;
  void send_unreachable(const ConnTuple& flow) override;

  std::optional<VerdictAction> verdict(PacketRef packet) const;
  const std::vector<ConnTuple>& unreachable() const { return unreachable_; }
  std::size_t verdict_count() const { return verdicts_.size(); }

  void set_listener(std::function<void(PacketRef, VerdictAction)> listener)
  {
    listener_ = std::move(listener);
  }

private:
  std::map<PacketRef, VerdictAction> verdicts_;
  std::vector<ConnTuple> unreachable_;
  std::function<void(PacketRef, VerdictAction)> listener_;
};


// ---------------------------------------------------------------------------
// Scenario description

class ScenarioError : public std::invalid_argument
{
public:
  using std::invalid_argument::invalid_argument;
};


enum class Expect
{
  Allow,
  DenyNotify,
  DenySilent,
};

std::string_view to_string(Expect expect);


struct ListenerSpec
{
  Pid pid = 0;
  std::uint16_t port = 0;
  Protocol protocol = Protocol::Tcp;
  std::optional<IpAddress> address;
};

struct Ident2Spec
{
  bool online = true;
  std::uint32_t resolver_cost_us = 0;
  std::set<Pid> stalled_pids;
};

struct HostSpec
{
  std::string name;
  std::vector<IpAddress> addresses;
  std::vector<ProcessRecord> processes;
  std::vector<ListenerSpec> listeners;
  Ident2Spec ident2;
};

struct AttemptSpec
{
  std::string name;
  std::string from_host;
  Pid from_pid = 0;
  std::optional<std::uint16_t> source_port;
  std::string to_host;
  std::uint16_t to_port = 0;
  Protocol protocol = Protocol::Tcp;
  bool loopback = false;
  std::uint64_t payload_bytes = 1;
  // The connector closes its socket right after sending, before anyone
  // can look it up (fire-and-forget UDP).
  bool closes_before_query = false;
  std::optional<Expect> expect;
};

struct ClientSpec
{
  std::uint32_t syn_retries = 2;
  std::uint32_t initial_rto_ms = 1000;
};

struct Scenario
{
  std::string name = "scenario";
  std::uint64_t seed = 1;
  Duration network_latency = std::chrono::microseconds(50);
  ClientSpec client;
  PolicyConfig policy;
  PeerPolicy peer;
  std::size_t queue_capacity = 1024;
  std::vector<HostSpec> hosts;
  std::vector<AttemptSpec> attempts;

  // Throws ScenarioError naming the offending element.
  void validate() const;

  // Strict parse: unknown keys are rejected. Throws ScenarioError.
  static Scenario from_json(const nlohmann::json& document);
  static Scenario load(const std::string& path);
};


struct AttemptResult
{
  std::string name;
  Protocol protocol = Protocol::Tcp;
  std::string from_host;
  Endpoint from;
  Pid from_pid = 0;
  std::string to_host;
  Endpoint to;
  Expect outcome = Expect::DenySilent;
  VerdictAction action = VerdictAction::DropSilent;
  std::optional<Reason> reason;
  Duration latency{0};
  bool icmp = false;
  std::uint32_t retries = 0;
  std::uint64_t adjudications = 0;
  std::uint64_t bypassed = 0;
  std::optional<Identity> connector;
  std::optional<Identity> listener;
  std::optional<Expect> expect;

  bool passed() const { return !expect || *expect == outcome; }
};


struct ScenarioReport
{
  std::string name;
  std::uint64_t seed = 0;
  std::vector<AttemptResult> results;
  nlohmann::ordered_json hosts = nlohmann::ordered_json::array();

  bool all_passed() const;
  std::vector<std::string> failures() const;

  // Stable key order: two equal reports serialize byte-identically.
  nlohmann::ordered_json to_json() const;
};


// Runs every attempt through real ident2 and netid instances wired to
// simulated backends on one virtual clock.
ScenarioReport run_scenario(const Scenario& scenario);


// ---------------------------------------------------------------------------
// Benchmarks (wall clock)

enum class BenchMode
{
  Off,
  On,
  Precache,
};

std::string_view to_string(BenchMode mode);
BenchMode parse_bench_mode(std::string_view text);


struct BenchOptions
{
  Duration resolver_cost = std::chrono::milliseconds(1);
  std::uint32_t verdict_timeout_ms = 500;
};


struct BenchRow
{
  std::uint32_t threads = 0;
  std::uint64_t size_bytes = 0;
  std::uint64_t total_connections = 0;
  double time_s = 0;
  double off_time_s = 0;
  double overhead_ratio = 1.0;
  double adjudication_mean_us = 0;
};


struct BenchReport
{
  std::string kind;
  BenchMode mode = BenchMode::Off;
  std::uint32_t connections_per_thread = 0;
  Duration resolver_cost{0};
  std::vector<BenchRow> rows;

  nlohmann::ordered_json to_json() const;
};


// Time for `threads` generators to each open `count` connections, send one
// byte and close, against one netid/ident2 pair on loopback.
double time_connections(std::uint32_t threads, std::uint32_t count,
                        BenchMode mode, const BenchOptions& options,
                        double* adjudication_mean_us = nullptr);

// Time to stream `size` bytes through one accepted connection, including
// its setup.
double time_transfer(std::uint64_t size, BenchMode mode, const BenchOptions& options,
                     double* adjudication_mean_us = nullptr);

// One row per thread count; the off-mode baseline is measured in the same
// run so overhead_ratio is always defined.
BenchReport bench_connections(const std::vector<std::uint32_t>& threads,
                              std::uint32_t count, BenchMode mode,
                              const BenchOptions& options);

// Best of `repetitions` for each size, in both `mode` and off.
BenchReport bench_throughput(const std::vector<std::uint64_t>& sizes,
                             BenchMode mode, const BenchOptions& options,
                             std::uint32_t repetitions = 3);

// "1M,10M,100M" -> bytes (K, M, G are powers of 1000).
std::vector<std::uint64_t> parse_sizes(std::string_view text);

} // namespace uservisor::sim

#endif // USERVISOR_SIMNET_HPP
