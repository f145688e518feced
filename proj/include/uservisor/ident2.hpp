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

#ifndef USERVISOR_IDENT2_HPP
#define USERVISOR_IDENT2_HPP

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "uservisor/executor.hpp"
#include "uservisor/introspection.hpp"
#include "uservisor/net.hpp"
#include "uservisor/precache.hpp"
#include "uservisor/wire.hpp"

namespace uservisor {

struct PeerPolicy
{
  std::uint16_t peer_port = 313;
  std::vector<Cidr> allowed_peer_cidrs = {Cidr::parse("::/0")};
  std::uint32_t retries = 3;
  std::uint32_t retry_interval_ms = 100;

  // Throws std::invalid_argument naming the field.
  void validate() const;

  // Relay exhaustion should land before the verdict deadline; returns a
  // warning when it does not.
  std::optional<std::string> check_against(std::uint32_t verdict_timeout_ms) const;

  bool operator==(const PeerPolicy&) const = default;
};


struct PrecacheConfig
{
  std::size_t capacity = 65536;
  std::uint32_t ttl_s = 60;

  bool operator==(const PrecacheConfig&) const = default;
};


struct Ident2Config
{
  PeerPolicy peer;
  PrecacheConfig precache;

  // Peers must send from a port strictly below this bound.
  std::uint32_t privileged_port_bound = 1024;

  // Addresses owned by this host. Loopback addresses are always local.
  std::vector<IpAddress> local_addresses;

  // Wall or virtual time each backend resolution occupies the resolver.
  // Resolutions are served one at a time.
  Duration resolver_cost{0};

  std::uint64_t seed = 0x1d2;
};


// Outbound side of the peer channel.
class DatagramSocket
{
public:
  virtual ~DatagramSocket() = default;

  virtual void send_to(const Endpoint& destination,
                       std::span<const std::uint8_t> datagram) = 0;
};


struct Resolution
{
  wire::ReplyStatus status = wire::ReplyStatus::NotFound;
  std::optional<Identity> identity;
};


struct Ident2Stats
{
  std::uint64_t local_queries = 0;
  std::uint64_t peer_queries = 0;
  std::uint64_t refused = 0;
  std::uint64_t malformed = 0;
  std::uint64_t relays = 0;
  std::uint64_t relay_retransmits = 0;
  std::uint64_t relay_exhausted = 0;
  std::uint64_t unmatched_replies = 0;
  std::uint64_t backend_calls = 0;
  std::uint64_t backend_errors = 0;
  std::uint64_t cache_hits = 0;
  std::uint64_t notifies = 0;
  std::uint64_t notify_closes = 0;
};


// The identity daemon. Confined to its executor: every entry point must be
// called from a task running there.
class Ident2Daemon
{
public:
  using ReplyHandler = std::function<void(const wire::Reply&)>;
  using FrameHandler = std::function<void(std::vector<std::uint8_t>)>;
  using ResolutionHandler = std::function<void(const Resolution&)>;

  // A resolution for which this returns true never completes, as if the
  // host lookup had hung.
  using StallPredicate =
      std::function<bool(const ConnTuple&, const std::optional<Identity>&)>;

  Ident2Daemon(
      Executor& executor,
      Ident2Config config,
      std::shared_ptr<const IntrospectionBackend> backend,
      std::shared_ptr<DatagramSocket> peer_socket);

  Ident2Daemon(const Ident2Daemon&) = delete;
  Ident2Daemon& operator=(const Ident2Daemon&) = delete;

  // One frame from the local socket. Queries and notifications are answered
  // through `respond`; malformed frames are logged and dropped.
  void handle_local_frame(std::span<const std::uint8_t> frame, FrameHandler respond);

  // Resolves locally when the targeted end lives on this host, otherwise
  // relays a LocalEnd query to the peer daemon at that address.
  void handle_local_query(const wire::Query& query, ReplyHandler respond);

  // Notifications are acknowledged with a REPLY echoing the request id.
  wire::Reply handle_notify(const wire::Notify& notify);
  wire::Reply handle_notify_close(const wire::NotifyClose& close);

  // One datagram from the peer port. `respond` sends a datagram back to the
  // source; it is not called for malformed input.
  void handle_peer_datagram(
      std::span<const std::uint8_t> datagram,
      const Endpoint& source,
      FrameHandler respond);

  // Precache first, then the backend.
  void resolve_endpoint(const ConnTuple& tuple, ResolutionHandler done);

  bool is_local(const IpAddress& address) const;
  bool peer_allowed(const Endpoint& source) const;

  void set_stall(StallPredicate stall) { stall_ = std::move(stall); }

  const Ident2Config& config() const { return config_; }
  const Ident2Stats& stats() const { return stats_; }
  std::size_t outstanding_relays() const { return relays_.size(); }
  Precache& precache() { return precache_; }

private:
  struct Relay
  {
    std::uint64_t client_request_id;
    ReplyHandler respond;
    Endpoint destination;
    std::vector<std::uint8_t> datagram;
    std::uint32_t attempts = 0;
    TimerId timer = 0;
  };

  void relay(const wire::Query& query, const ConnTuple& oriented, ReplyHandler respond);
  void relay_timeout(std::uint64_t relay_id);
  void handle_peer_reply(const wire::Reply& reply, const Endpoint& source);
  std::uint64_t fresh_request_id();

  Executor& executor_;
  Ident2Config config_;
  std::shared_ptr<const IntrospectionBackend> backend_;
  std::shared_ptr<DatagramSocket> peer_socket_;
  Precache precache_;
  StallPredicate stall_;
  Timestamp resolver_free_at_{0};
  std::mt19937_64 rng_;
  std::unordered_map<std::uint64_t, Relay> relays_;
  Ident2Stats stats_;
};


// Client side of the local socket, as netid and tools see it.
class Ident2Client
{
public:
  using ReplyHandler = std::function<void(const wire::Reply&)>;

  virtual ~Ident2Client() = default;

  // Sends a QUERY, NOTIFY or NOTIFY_CLOSE; `on_reply` receives the matching
  // REPLY. May never be called if the daemon does not answer.
  virtual void send(const wire::Message& message, ReplyHandler on_reply) = 0;
};


// Talks to a daemon in the same process through the same frames the local
// socket carries. Replies arrive on the daemon's executor.
class InProcessIdent2Client final : public Ident2Client
{
public:
  InProcessIdent2Client(Executor& daemon_executor, Ident2Daemon& daemon)
    : executor_(daemon_executor), daemon_(daemon)
  {}

  void send(const wire::Message& message, ReplyHandler on_reply) override;

private:
  Executor& executor_;
  Ident2Daemon& daemon_;
};

} // namespace uservisor

#endif // USERVISOR_IDENT2_HPP
