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

#include "uservisor/netid.hpp"

#include <spdlog/spdlog.h>

namespace uservisor {

std::string_view to_string(VerdictAction action)
{
  switch (action) {
    case VerdictAction::Accept: return "accept";
    case VerdictAction::DropNotify: return "drop-notify";
    case VerdictAction::DropSilent: return "drop-silent";
  }
  return "unknown";
}


std::string_view to_string(Admission admission)
{
  switch (admission) {
    case Admission::Bypassed: return "bypassed";
    case Admission::Enqueued: return "enqueued";
    case Admission::DroppedOverflow: return "dropped-overflow";
  }
  return "unknown";
}


ConnTuple ConntrackTable::canonical(const ConnTuple& flow)
{
  const ConnTuple reversed = flow.swapped();
  return reversed < flow ? reversed : flow;
}


void ConntrackTable::insert(const ConnTuple& flow, Timestamp now)
{
  entries_[canonical(flow)] = Entry{now, false};
}


bool ConntrackTable::touch(const ConnTuple& flow, Timestamp now)
{
  auto it = entries_.find(canonical(flow));
  if (it == entries_.end()) {
    return false;
  }
  it->second.last_seen = now;
  return true;
}


bool ConntrackTable::contains(const ConnTuple& flow) const
{
  return entries_.contains(canonical(flow));
}


void ConntrackTable::mark_closed(const ConnTuple& flow)
{
  if (auto it = entries_.find(canonical(flow)); it != entries_.end()) {
    it->second.closed = true;
  }
}


bool ConntrackTable::is_closed(const ConnTuple& flow) const
{
  auto it = entries_.find(canonical(flow));
  return it != entries_.end() && it->second.closed;
}


void ConntrackTable::erase(const ConnTuple& flow)
{
  entries_.erase(canonical(flow));
}


std::size_t ConntrackTable::gc(Timestamp now)
{
  return std::erase_if(entries_, [&](const auto& item) {
    const auto& [flow, entry] = item;
    if (flow.protocol == Protocol::Udp) {
      return now - entry.last_seen > udp_ttl_;
    }
    return entry.closed;
  });
}


void LatencyHistogram::record(Duration latency)
{
  const auto us = static_cast<std::uint64_t>(
      std::chrono::duration_cast<std::chrono::microseconds>(latency).count());
  std::size_t bucket = 0;
  while (bucket < kBoundsUs.size() && us > kBoundsUs[bucket]) {
    ++bucket;
  }
  ++buckets_[bucket];
  ++count_;
  total_ += latency;
  max_ = std::max(max_, latency);
}


nlohmann::ordered_json LatencyHistogram::to_json() const
{
  nlohmann::ordered_json buckets = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < buckets_.size(); ++i) {
    nlohmann::ordered_json b;
    if (i < kBoundsUs.size()) {
      b["le_us"] = kBoundsUs[i];
    } else {
      b["le_us"] = "inf";
    }
    b["count"] = buckets_[i];
    buckets.push_back(std::move(b));
  }
  nlohmann::ordered_json out;
  out["count"] = count_;
  out["mean_us"] = count_ == 0 ? 0.0
                               : std::chrono::duration<double, std::micro>(total_).count() /
                                     static_cast<double>(count_);
  out["max_us"] = std::chrono::duration<double, std::micro>(max_).count();
  out["buckets"] = std::move(buckets);
  return out;
}


nlohmann::ordered_json NetidMetrics::to_json() const
{
  nlohmann::ordered_json out;
  out["packets"] = packets;
  out["bypassed"] = bypassed;
  out["adjudications"] = adjudications;
  out["overflow_drops"] = overflow_drops;
  out["unreachable_sent"] = unreachable_sent;
  out["held_packets"] = held_packets;
  out["timeouts"] = timeouts;
  out["lookup_failures"] = lookup_failures;
  out["single_reply_accepts"] = single_reply_accepts;
  out["max_pending"] = max_pending;
  nlohmann::ordered_json actions;
  for (auto action : {VerdictAction::Accept, VerdictAction::DropNotify,
                      VerdictAction::DropSilent}) {
    auto it = by_action.find(action);
    actions[std::string(to_string(action))] = it == by_action.end() ? 0 : it->second;
  }
  out["verdicts"] = std::move(actions);
  nlohmann::ordered_json reasons;
  for (auto reason : {Reason::UserMatch, Reason::GroupMatch, Reason::PrivilegedPort,
                      Reason::ExemptConnector, Reason::ExemptListener,
                      Reason::NoRuleMatched}) {
    auto it = by_reason.find(reason);
    reasons[std::string(to_string(reason))] = it == by_reason.end() ? 0 : it->second;
  }
  out["reasons"] = std::move(reasons);
  out["latency"] = latency.to_json();
  return out;
}


Netid::Netid(
    Executor& executor,
    NetidConfig config,
    Ident2Client& ident2,
    PacketQueueBackend& queue)
  : executor_(executor),
    config_(std::move(config)),
    ident2_(ident2),
    queue_(queue),
    conntrack_(config_.udp_ttl),
    rng_(config_.seed)
{
  config_.policy.validate();
  if (config_.queue_capacity == 0) {
    throw std::invalid_argument("queue_capacity must be > 0");
  }
}


Netid::~Netid()
{
  for (auto& [id, pending] : pending_) {
    executor_.cancel(pending.deadline);
  }
}


Admission Netid::on_packet(const PacketEvent& event)
{
  ++metrics_.packets;
  const Timestamp now = executor_.now();

  const bool stale_close = event.is_flow_initial && conntrack_.is_closed(event.flow);
  if (stale_close) {
    conntrack_.erase(event.flow);
  } else if (conntrack_.touch(event.flow, now)) {
    if (event.closes_flow) {
      conntrack_.mark_closed(event.flow);
    }
    ++metrics_.bypassed;
    queue_.deliver_verdict(event.packet_ref, VerdictAction::Accept);
    return Admission::Bypassed;
  }

  const ConnTuple key =
      event.flow.swapped() < event.flow ? event.flow.swapped() : event.flow;
  if (auto it = pending_by_flow_.find(key); it != pending_by_flow_.end()) {
    // Never let a follow-up overtake its flow's verdict.
    pending_.at(it->second).held.push_back(event.packet_ref);
    ++metrics_.held_packets;
    return Admission::Enqueued;
  }

  if (pending_.size() >= config_.queue_capacity) {
    ++metrics_.overflow_drops;
    queue_.deliver_verdict(event.packet_ref, VerdictAction::DropSilent);
    return Admission::DroppedOverflow;
  }

  start_adjudication(event);
  return Admission::Enqueued;
}


void Netid::start_adjudication(const PacketEvent& event)
{
  ++metrics_.adjudications;
  const std::uint64_t id = next_id_++;
  Pending pending;
  pending.id = id;
  pending.first = event;
  pending.first.arrival = executor_.now();
  pending.deadline = executor_.schedule_after(
      std::chrono::milliseconds(config_.policy.verdict_timeout_ms), [this, id] {
        if (pending_.contains(id)) {
          ++metrics_.timeouts;
          finish(id, VerdictAction::DropSilent, std::nullopt);
        }
      });
  const ConnTuple& flow = event.flow;
  const ConnTuple key = flow.swapped() < flow ? flow.swapped() : flow;
  pending_by_flow_.emplace(key, id);
  pending_.emplace(id, std::move(pending));
  metrics_.max_pending = std::max(metrics_.max_pending, pending_.size());

  // Both queries are phrased from the listener's side: the listener is the
  // local end, the connector the remote end.
  const ConnTuple listener_view = flow.swapped();
  for (Role role : {Role::Listener, Role::Connector}) {
    const auto target = role == Role::Listener ? wire::Target::LocalEnd
                                               : wire::Target::RemoteEnd;
    ident2_.send(wire::Query{rng_(), listener_view, target},
                 [this, id, role, alive = std::weak_ptr<bool>(alive_)](
                     const wire::Reply& r) {
                   if (alive.lock()) {
                     on_reply(id, role, r);
                   }
                 });
  }
}


void Netid::on_reply(std::uint64_t id, Role role, const wire::Reply& reply)
{
  auto it = pending_.find(id);
  if (it == pending_.end()) {
    return; // already decided
  }
  Pending& pending = it->second;
  if (reply.status != wire::ReplyStatus::Ok || !reply.identity) {
    ++metrics_.lookup_failures;
    finish(id, VerdictAction::DropSilent, std::nullopt);
    return;
  }

  const std::uint16_t port = pending.first.flow.far_port;
  (role == Role::Listener ? pending.listener : pending.connector) = reply.identity;

  const bool have_both = pending.listener && pending.connector;
  if (!have_both) {
    if (preliminary_check(*reply.identity, role, port, config_.policy) ==
        Preliminary::AllowNow) {
      ++metrics_.single_reply_accepts;
      finish(id, VerdictAction::Accept,
             preliminary_reason(role, port, config_.policy));
    }
    return;
  }

  const Decision decision =
      evaluate(*pending.connector, *pending.listener, port, config_.policy);
  finish(id, decision.allow ? VerdictAction::Accept : VerdictAction::DropNotify,
         decision.reason);
}


void Netid::finish(std::uint64_t id, VerdictAction action, std::optional<Reason> reason)
{
  auto node = pending_.extract(id);
  if (node.empty()) {
    return;
  }
  Pending& pending = node.mapped();
  executor_.cancel(pending.deadline);
  const ConnTuple& flow = pending.first.flow;
  pending_by_flow_.erase(flow.swapped() < flow ? flow.swapped() : flow);

  const Timestamp now = executor_.now();
  ++metrics_.by_action[action];
  if (reason) {
    ++metrics_.by_reason[*reason];
  }
  metrics_.latency.record(now - pending.first.arrival);

  if (action == VerdictAction::Accept) {
    conntrack_.insert(flow, now);
    if (pending.first.closes_flow) {
      conntrack_.mark_closed(flow);
    }
  }

  queue_.deliver_verdict(pending.first.packet_ref, action);
  // Held follow-ups share the flow's fate; only the flow-initial packet
  // carries the ICMP signal.
  const VerdictAction follow_up =
      action == VerdictAction::Accept ? VerdictAction::Accept : VerdictAction::DropSilent;
  for (PacketRef held : pending.held) {
    queue_.deliver_verdict(held, follow_up);
  }
  if (action == VerdictAction::DropNotify) {
    emit_unreachable(flow);
  }

  if (observer_) {
    observer_(VerdictRecord{flow, action, reason, pending.connector,
                            pending.listener, pending.first.arrival, now});
  }
}


void Netid::emit_unreachable(const ConnTuple& flow)
{
  ++metrics_.unreachable_sent;
  try {
    queue_.send_unreachable(flow);
  } catch (const std::exception& e) {
    spdlog::warn("netid: could not signal unreachable for {}: {}",
                 flow.to_string(), e.what());
  }
}


std::size_t Netid::conntrack_gc(Timestamp now)
{
  return conntrack_.gc(now);
}


void Netid::shutdown()
{
  std::vector<std::uint64_t> ids;
  ids.reserve(pending_.size());
  for (const auto& [id, pending] : pending_) {
    ids.push_back(id);
  }
  std::sort(ids.begin(), ids.end());
  for (std::uint64_t id : ids) {
    finish(id, VerdictAction::DropSilent, std::nullopt);
  }
}

} // namespace uservisor
