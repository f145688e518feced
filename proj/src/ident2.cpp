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

#include "uservisor/ident2.hpp"

#include <algorithm>

#include <spdlog/spdlog.h>

namespace uservisor {

using wire::Reply;
using wire::ReplyStatus;

void PeerPolicy::validate() const
{
  if (retries < 1) {
    throw std::invalid_argument("peer.retries must be >= 1");
  }
  if (retry_interval_ms < 1) {
    throw std::invalid_argument("peer.retry_interval_ms must be >= 1");
  }
}


std::optional<std::string> PeerPolicy::check_against(
    std::uint32_t verdict_timeout_ms) const
{
  const std::uint64_t budget = std::uint64_t(retries) * retry_interval_ms;
  if (budget >= verdict_timeout_ms) {
    return "peer.retries x peer.retry_interval_ms (" + std::to_string(budget) +
           " ms) is not below policy.verdict_timeout_ms (" +
           std::to_string(verdict_timeout_ms) +
           " ms); relayed lookups will be cut off by the verdict deadline";
  }
  return std::nullopt;
}


Ident2Daemon::Ident2Daemon(
    Executor& executor,
    Ident2Config config,
    std::shared_ptr<const IntrospectionBackend> backend,
    std::shared_ptr<DatagramSocket> peer_socket)
  : executor_(executor),
    config_(std::move(config)),
    backend_(std::move(backend)),
    peer_socket_(std::move(peer_socket)),
    precache_(config_.precache.capacity,
              std::chrono::seconds(config_.precache.ttl_s)),
    rng_(config_.seed)
{
  config_.peer.validate();
}


std::uint64_t Ident2Daemon::fresh_request_id()
{
  std::uint64_t id = 0;
  do {
    id = rng_();
  } while (id == 0 || relays_.contains(id));
  return id;
}


bool Ident2Daemon::is_local(const IpAddress& address) const
{
  return address.is_loopback() ||
         std::find(config_.local_addresses.begin(), config_.local_addresses.end(),
                   address) != config_.local_addresses.end();
}


bool Ident2Daemon::peer_allowed(const Endpoint& source) const
{
  if (source.port >= config_.privileged_port_bound) {
    return false;
  }
  return std::any_of(config_.peer.allowed_peer_cidrs.begin(),
                     config_.peer.allowed_peer_cidrs.end(),
                     [&](const Cidr& c) { return c.contains(source.address); });
}


void Ident2Daemon::handle_local_frame(
    std::span<const std::uint8_t> frame,
    FrameHandler respond)
{
  wire::Message message;
  try {
    message = wire::decode(frame);
  } catch (const wire::FrameError& e) {
    ++stats_.malformed;
    spdlog::warn("ident2: dropping malformed local frame: {}", e.what());
    return;
  }

  auto send = [respond = std::move(respond)](const Reply& reply) {
    respond(wire::encode(reply));
  };

  if (const auto* query = std::get_if<wire::Query>(&message)) {
    handle_local_query(*query, std::move(send));
  } else if (const auto* notify = std::get_if<wire::Notify>(&message)) {
    send(handle_notify(*notify));
  } else if (const auto* close = std::get_if<wire::NotifyClose>(&message)) {
    send(handle_notify_close(*close));
  } else {
    ++stats_.malformed;
    spdlog::warn("ident2: unexpected REPLY on the local socket");
  }
}


void Ident2Daemon::handle_local_query(const wire::Query& query, ReplyHandler respond)
{
  ++stats_.local_queries;
  // Re-orient so the end being asked about is always endpoint_addr.
  const ConnTuple oriented = query.target == wire::Target::LocalEnd
                                 ? query.tuple
                                 : query.tuple.swapped();
  if (is_local(oriented.endpoint_addr)) {
    resolve_endpoint(oriented, [id = query.request_id,
                                respond = std::move(respond)](const Resolution& r) {
      respond(Reply{id, r.status, r.identity});
    });
    return;
  }
  relay(query, oriented, std::move(respond));
}


Reply Ident2Daemon::handle_notify(const wire::Notify& notify)
{
  ++stats_.notifies;
  precache_.notify(PrecacheKey{notify.protocol, notify.address, notify.port},
                   notify.identity, executor_.now());
  return Reply::ok(notify.request_id, notify.identity);
}


Reply Ident2Daemon::handle_notify_close(const wire::NotifyClose& close)
{
  ++stats_.notify_closes;
  auto removed = precache_.close(PrecacheKey{close.protocol, close.address, close.port});
  if (removed) {
    return Reply::ok(close.request_id, std::move(*removed));
  }
  return Reply::failure(close.request_id, ReplyStatus::NotFound);
}


void Ident2Daemon::handle_peer_datagram(
    std::span<const std::uint8_t> datagram,
    const Endpoint& source,
    FrameHandler respond)
{
  wire::Message message;
  try {
    message = wire::decode(datagram);
  } catch (const wire::FrameError& e) {
    ++stats_.malformed;
    spdlog::debug("ident2: dropping malformed datagram from {}: {}",
                  source.to_string(), e.what());
    return;
  }

  if (const auto* reply = std::get_if<Reply>(&message)) {
    handle_peer_reply(*reply, source);
    return;
  }

  const auto* query = std::get_if<wire::Query>(&message);
  if (query == nullptr) {
    // Precache updates are only accepted over the local socket.
    ++stats_.refused;
    spdlog::debug("ident2: ignoring notification from peer {}", source.to_string());
    return;
  }

  ++stats_.peer_queries;
  if (!peer_allowed(source) || query->target != wire::Target::LocalEnd ||
      !is_local(query->tuple.endpoint_addr)) {
    ++stats_.refused;
    spdlog::debug("ident2: refused query from {}", source.to_string());
    respond(wire::encode(Reply::failure(query->request_id, ReplyStatus::Refused)));
    return;
  }

  resolve_endpoint(query->tuple, [id = query->request_id,
                                  respond = std::move(respond)](const Resolution& r) {
    respond(wire::encode(Reply{id, r.status, r.identity}));
  });
}


void Ident2Daemon::handle_peer_reply(const Reply& reply, const Endpoint& source)
{
  auto it = relays_.find(reply.request_id);
  if (it == relays_.end() || it->second.destination.address != source.address ||
      !peer_allowed(source)) {
    ++stats_.unmatched_replies;
    return;
  }
  Relay relay = std::move(it->second);
  relays_.erase(it);
  executor_.cancel(relay.timer);
  relay.respond(Reply{relay.client_request_id, reply.status, reply.identity});
}


void Ident2Daemon::relay(
    const wire::Query& query,
    const ConnTuple& oriented,
    ReplyHandler respond)
{
  ++stats_.relays;
  const std::uint64_t relay_id = fresh_request_id();
  Relay entry;
  entry.client_request_id = query.request_id;
  entry.respond = std::move(respond);
  entry.destination = Endpoint{oriented.endpoint_addr, config_.peer.peer_port};
  entry.datagram =
      wire::encode(wire::Query{relay_id, oriented, wire::Target::LocalEnd});
  entry.attempts = 1;
  entry.timer = executor_.schedule_after(
      std::chrono::milliseconds(config_.peer.retry_interval_ms),
      [this, relay_id] { relay_timeout(relay_id); });
  const Endpoint destination = entry.destination;
  const std::vector<std::uint8_t> datagram = entry.datagram;
  relays_.emplace(relay_id, std::move(entry));
  peer_socket_->send_to(destination, datagram);
}


void Ident2Daemon::relay_timeout(std::uint64_t relay_id)
{
  auto it = relays_.find(relay_id);
  if (it == relays_.end()) {
    return;
  }
  Relay& relay = it->second;
  if (relay.attempts >= config_.peer.retries) {
    ++stats_.relay_exhausted;
    spdlog::debug("ident2: no answer from peer {} after {} attempt(s)",
                  relay.destination.to_string(), relay.attempts);
    Relay done = std::move(relay);
    relays_.erase(it);
    done.respond(Reply::failure(done.client_request_id, ReplyStatus::NotFound));
    return;
  }
  ++relay.attempts;
  ++stats_.relay_retransmits;
  relay.timer = executor_.schedule_after(
      std::chrono::milliseconds(config_.peer.retry_interval_ms),
      [this, relay_id] { relay_timeout(relay_id); });
  peer_socket_->send_to(relay.destination, relay.datagram);
}


void Ident2Daemon::resolve_endpoint(const ConnTuple& tuple, ResolutionHandler done)
{
  const Timestamp now = executor_.now();
  for (const IpAddress& address :
       {tuple.endpoint_addr, IpAddress::any_v4(), IpAddress::any_v6()}) {
    if (auto hit = precache_.lookup(
            PrecacheKey{tuple.protocol, address, tuple.endpoint_port}, now)) {
      ++stats_.cache_hits;
      done(Resolution{ReplyStatus::Ok, std::move(*hit)});
      return;
    }
  }

  // One resolution at a time, each occupying the resolver for
  // resolver_cost.
  const Timestamp start = std::max(now, resolver_free_at_);
  resolver_free_at_ = start + config_.resolver_cost;
  executor_.schedule_after(
      resolver_free_at_ - now, [this, tuple, done = std::move(done)] {
        ++stats_.backend_calls;
        Resolution result;
        try {
          result.identity = backend_->resolve(tuple);
          result.status = result.identity ? ReplyStatus::Ok : ReplyStatus::NotFound;
        } catch (const BackendError& e) {
          ++stats_.backend_errors;
          spdlog::warn("ident2: resolver failed for {}: {}", tuple.to_string(),
                       e.what());
          result.status = ReplyStatus::Error;
        }
        if (stall_ && stall_(tuple, result.identity)) {
          return;
        }
        done(result);
      });
}


void InProcessIdent2Client::send(const wire::Message& message, ReplyHandler on_reply)
{
  auto frame = wire::encode(message);
  executor_.post([this, frame = std::move(frame), on_reply = std::move(on_reply)] {
    daemon_.handle_local_frame(frame, [on_reply](std::vector<std::uint8_t> bytes) {
      try {
        const auto decoded = wire::decode(bytes);
        if (const auto* reply = std::get_if<Reply>(&decoded)) {
          on_reply(*reply);
        }
      } catch (const wire::FrameError& e) {
        spdlog::error("ident2 client: undecodable reply: {}", e.what());
      }
    });
  });
}

} // namespace uservisor
