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

#include "uservisor/introspection.hpp"

#include <algorithm>
#include <mutex>

namespace uservisor {

namespace {

bool wildcard_covers(const IpAddress& bound, const IpAddress& wanted)
{
  if (!bound.is_unspecified()) {
    return false;
  }
  // "::" is dual-stack; "0.0.0.0" only takes IPv4.
  return bound == IpAddress::any_v6() || wanted.is_v4_mapped();
}

} // namespace


std::optional<SocketRecord> match_socket(
    const std::vector<SocketRecord>& candidates,
    const ConnTuple& tuple)
{
  const SocketRecord* exact_local = nullptr;
  const SocketRecord* any_local = nullptr;
  for (const auto& s : candidates) {
    if (s.protocol != tuple.protocol || s.local_port != tuple.endpoint_port) {
      continue;
    }
    if (s.local_addr == tuple.endpoint_addr && s.remote_addr == tuple.far_addr &&
        s.remote_port == tuple.far_port) {
      return s;
    }
    if (!s.wildcard_remote()) {
      continue;
    }
    if (s.local_addr == tuple.endpoint_addr) {
      if (exact_local == nullptr) {
        exact_local = &s;
      }
    } else if (wildcard_covers(s.local_addr, tuple.endpoint_addr)) {
      if (any_local == nullptr) {
        any_local = &s;
      }
    }
  }
  if (exact_local != nullptr) {
    return *exact_local;
  }
  if (any_local != nullptr) {
    return *any_local;
  }
  return std::nullopt;
}


std::optional<Identity> IntrospectionBackend::resolve(const ConnTuple& tuple) const
{
  const auto socket = find_socket(tuple);
  if (!socket) {
    return std::nullopt;
  }
  const auto owners = socket_owners(socket->socket_id);
  if (owners.empty()) {
    return std::nullopt;
  }
  return process_identity(owners.front());
}


void SimHostTable::check_available() const
{
  if (!available_) {
    throw BackendError("simulated host introspection is unavailable");
  }
}


std::optional<SocketRecord> SimHostTable::find_socket_locked(
    const ConnTuple& tuple) const
{
  check_available();
  const Key exact{tuple.protocol, tuple.endpoint_addr, tuple.endpoint_port,
                  tuple.far_addr, tuple.far_port};
  if (auto it = by_tuple_.find(exact); it != by_tuple_.end()) {
    return sockets_.at(it->second);
  }
  for (const IpAddress& local :
       {tuple.endpoint_addr, IpAddress::any_v4(), IpAddress::any_v6()}) {
    if (local != tuple.endpoint_addr && !wildcard_covers(local, tuple.endpoint_addr)) {
      continue;
    }
    const Key wildcard{tuple.protocol, local, tuple.endpoint_port, IpAddress(), 0};
    if (auto it = by_tuple_.find(wildcard); it != by_tuple_.end()) {
      return sockets_.at(it->second);
    }
  }
  return std::nullopt;
}


std::vector<Pid> SimHostTable::socket_owners_locked(SocketId socket_id) const
{
  check_available();
  std::vector<Pid> owners;
  if (auto it = holders_.find(socket_id); it != holders_.end()) {
    for (Pid pid : it->second) {
      if (processes_.contains(pid)) {
        owners.push_back(pid);
      }
    }
  }
  return owners;
}


std::optional<SocketRecord> SimHostTable::find_socket(const ConnTuple& tuple) const
{
  std::shared_lock lock(mutex_);
  return find_socket_locked(tuple);
}


std::vector<Pid> SimHostTable::socket_owners(SocketId socket_id) const
{
  std::shared_lock lock(mutex_);
  return socket_owners_locked(socket_id);
}


std::optional<Identity> SimHostTable::process_identity(Pid pid) const
{
  std::shared_lock lock(mutex_);
  check_available();
  if (auto it = processes_.find(pid); it != processes_.end()) {
    return it->second.identity();
  }
  return std::nullopt;
}


std::optional<Identity> SimHostTable::resolve(const ConnTuple& tuple) const
{
  std::shared_lock lock(mutex_);
  const auto socket = find_socket_locked(tuple);
  if (!socket) {
    return std::nullopt;
  }
  const auto owners = socket_owners_locked(socket->socket_id);
  if (owners.empty()) {
    return std::nullopt;
  }
  return processes_.at(owners.front()).identity();
}


void SimHostTable::add_process(const ProcessRecord& process)
{
  validate(process.identity());
  std::unique_lock lock(mutex_);
  if (process.pid == 0) {
    throw std::invalid_argument("pid must be positive");
  }
  if (processes_.contains(process.pid)) {
    throw std::invalid_argument(
        "pid " + std::to_string(process.pid) + " is already live");
  }
  ProcessRecord copy = process;
  copy.open_socket_ids.clear();
  processes_.emplace(process.pid, std::move(copy));
}


void SimHostTable::exit_process(Pid pid)
{
  std::unique_lock lock(mutex_);
  auto it = processes_.find(pid);
  if (it == processes_.end()) {
    return;
  }
  for (SocketId id : it->second.open_socket_ids) {
    holders_[id].erase(pid);
  }
  processes_.erase(it);
}


void SimHostTable::set_primary_gid(Pid pid, Gid gid)
{
  std::unique_lock lock(mutex_);
  auto it = processes_.find(pid);
  if (it == processes_.end()) {
    throw std::invalid_argument("no live process " + std::to_string(pid));
  }
  it->second.primary_gid = gid;
}


SocketId SimHostTable::open_socket(
    Pid pid,
    Protocol protocol,
    const IpAddress& local_addr,
    std::uint16_t local_port,
    const IpAddress& remote_addr,
    std::uint16_t remote_port)
{
  std::unique_lock lock(mutex_);
  auto process = processes_.find(pid);
  if (process == processes_.end()) {
    throw std::invalid_argument("no live process " + std::to_string(pid));
  }
  const Key key{protocol, local_addr, local_port, remote_addr, remote_port};
  if (by_tuple_.contains(key)) {
    throw std::invalid_argument(
        "socket " + std::string(to_string(protocol)) + " " +
        Endpoint{local_addr, local_port}.to_string() + " -> " +
        Endpoint{remote_addr, remote_port}.to_string() + " already exists");
  }
  const SocketId id = next_socket_id_++;
  sockets_.emplace(id, SocketRecord{id, protocol, local_addr, local_port,
                                    remote_addr, remote_port, process->second.uid});
  by_tuple_.emplace(key, id);
  holders_[id].insert(pid);
  process->second.open_socket_ids.insert(id);
  return id;
}


void SimHostTable::share_socket(SocketId socket_id, Pid pid)
{
  std::unique_lock lock(mutex_);
  auto process = processes_.find(pid);
  if (process == processes_.end() || !sockets_.contains(socket_id)) {
    throw std::invalid_argument("unknown process or socket");
  }
  holders_[socket_id].insert(pid);
  process->second.open_socket_ids.insert(socket_id);
}


void SimHostTable::close_socket(SocketId socket_id)
{
  std::unique_lock lock(mutex_);
  auto it = sockets_.find(socket_id);
  if (it == sockets_.end()) {
    return;
  }
  const SocketRecord& s = it->second;
  by_tuple_.erase(
      Key{s.protocol, s.local_addr, s.local_port, s.remote_addr, s.remote_port});
  for (Pid pid : holders_[socket_id]) {
    if (auto p = processes_.find(pid); p != processes_.end()) {
      p->second.open_socket_ids.erase(socket_id);
    }
  }
  holders_.erase(socket_id);
  sockets_.erase(it);
}


void SimHostTable::set_available(bool available)
{
  std::unique_lock lock(mutex_);
  available_ = available;
}


std::size_t SimHostTable::socket_count() const
{
  std::shared_lock lock(mutex_);
  return sockets_.size();
}


std::size_t SimHostTable::process_count() const
{
  std::shared_lock lock(mutex_);
  return processes_.size();
}


void SimHostTable::load_json(SimHostTable& table, const nlohmann::json& document)
{
  try {
    for (const auto& p : document.at("processes")) {
      ProcessRecord record;
      record.pid = p.at("pid").get<Pid>();
      record.uid = p.at("uid").get<Uid>();
      record.username = p.at("username").get<std::string>();
      record.primary_gid = p.at("primary_gid").get<Gid>();
      record.supplemental_gids =
          p.value("supplemental_gids", std::set<Gid>{});
      table.add_process(record);
    }
    if (document.contains("sockets")) {
      for (const auto& s : document.at("sockets")) {
        const Endpoint local = Endpoint::parse(s.at("local").get<std::string>());
        Endpoint remote{};
        if (s.contains("remote")) {
          remote = Endpoint::parse(s.at("remote").get<std::string>());
        }
        const SocketId id = table.open_socket(
            s.at("pid").get<Pid>(),
            parse_protocol(s.at("protocol").get<std::string>()),
            local.address, local.port, remote.address, remote.port);
        for (Pid other : s.value("shared_with", std::vector<Pid>{})) {
          table.share_socket(id, other);
        }
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("host table: ") + e.what());
  }
}

} // namespace uservisor
