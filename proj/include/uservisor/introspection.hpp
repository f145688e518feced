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

#ifndef USERVISOR_INTROSPECTION_HPP
#define USERVISOR_INTROSPECTION_HPP

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "uservisor/net.hpp"
#include "uservisor/policy.hpp"

namespace uservisor {

using SocketId = std::uint64_t;


struct SocketRecord
{
  SocketId socket_id = 0;
  Protocol protocol = Protocol::Tcp;
  IpAddress local_addr;
  std::uint16_t local_port = 0;
  // Unspecified address and port 0 for listeners and unconnected UDP.
  IpAddress remote_addr;
  std::uint16_t remote_port = 0;
  Uid owner_uid = 0;

  bool wildcard_remote() const
  {
    return remote_addr.is_unspecified() && remote_port == 0;
  }

  bool operator==(const SocketRecord&) const = default;
};


struct ProcessRecord
{
  Pid pid = 0;
  Uid uid = 0;
  std::string username;
  Gid primary_gid = 0;
  std::set<Gid> supplemental_gids;
  std::set<SocketId> open_socket_ids;

  Identity identity() const
  {
    return Identity{uid, username, primary_gid, supplemental_gids, pid};
  }
};


// The backend could not be consulted at all, as opposed to finding nothing.
class BackendError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};


// Maps a connection endpoint to the process that owns it.
class IntrospectionBackend
{
public:
  virtual ~IntrospectionBackend() = default;

  // Exact 5-tuple match first; otherwise a listener or unconnected socket
  // on (protocol, local address or wildcard, local port).
  virtual std::optional<SocketRecord> find_socket(const ConnTuple& tuple) const = 0;

  // Live holders of the socket in ascending pid order.
  virtual std::vector<Pid> socket_owners(SocketId socket_id) const = 0;

  virtual std::optional<Identity> process_identity(Pid pid) const = 0;

  // find_socket, then the lowest owning pid, then that process's identity.
  // nullopt when any stage comes up empty. Throws BackendError.
  virtual std::optional<Identity> resolve(const ConnTuple& tuple) const;
};


// Deterministic in-memory host: the default backend for simulation and all
// acceptance tests. Thread-safe; each query observes a consistent snapshot.
class SimHostTable final : public IntrospectionBackend
{
public:
  std::optional<SocketRecord> find_socket(const ConnTuple& tuple) const override;
  std::vector<Pid> socket_owners(SocketId socket_id) const override;
  std::optional<Identity> process_identity(Pid pid) const override;
  std::optional<Identity> resolve(const ConnTuple& tuple) const override;

  // Throws std::invalid_argument if the pid is already live.
  void add_process(const ProcessRecord& process);

  // The process disappears; sockets it held stay behind until closed, the
  // way a socket outlives a holder that another process still shares.
  void exit_process(Pid pid);

  // Equivalent of `newgrp`/`sg` for a running process.
  void set_primary_gid(Pid pid, Gid gid);

  // Opens a socket held by `pid`. Throws std::invalid_argument on an
  // unknown pid or a clash with a live socket's 5-tuple.
  SocketId open_socket(
      Pid pid,
      Protocol protocol,
      const IpAddress& local_addr,
      std::uint16_t local_port,
      const IpAddress& remote_addr = IpAddress(),
      std::uint16_t remote_port = 0);

  // A second process gains a descriptor for the socket (fork, SCM_RIGHTS).
  void share_socket(SocketId socket_id, Pid pid);

  void close_socket(SocketId socket_id);

  // While unavailable every query throws BackendError.
  void set_available(bool available);

  std::size_t socket_count() const;
  std::size_t process_count() const;

  // {"processes": [...], "sockets": [...]} as used by the daemon's sim
  // backend file. Throws std::invalid_argument on a bad document.
  static void load_json(SimHostTable& table, const nlohmann::json& document);

private:
  struct Key
  {
    Protocol protocol;
    IpAddress local_addr;
    std::uint16_t local_port;
    IpAddress remote_addr;
    std::uint16_t remote_port;
    auto operator<=>(const Key&) const = default;
  };

  void check_available() const;
  std::optional<SocketRecord> find_socket_locked(const ConnTuple& tuple) const;
  std::vector<Pid> socket_owners_locked(SocketId socket_id) const;

  mutable std::shared_mutex mutex_;
  bool available_ = true;
  SocketId next_socket_id_ = 1000;
  std::map<Pid, ProcessRecord> processes_;
  std::map<SocketId, SocketRecord> sockets_;
  std::map<Key, SocketId> by_tuple_;
  std::map<SocketId, std::set<Pid>> holders_;
};


// Queries the running Linux kernel: socket diagnostics over netlink for
// TCP, the /proc/net/udp tables for UDP, and /proc/<pid>/fd for ownership.
class KernelIntrospection final : public IntrospectionBackend
{
public:
  // True when this build and platform provide the interfaces used here.
  static bool supported();

  std::optional<SocketRecord> find_socket(const ConnTuple& tuple) const override;
  std::vector<Pid> socket_owners(SocketId socket_id) const override;
  std::optional<Identity> process_identity(Pid pid) const override;

  // Parses one /proc/net/udp or /proc/net/udp6 table. Exposed for tests.
  static std::vector<SocketRecord> parse_proc_net_table(
      const std::string& contents, Protocol protocol);

  // Parses /proc/<pid>/status content into an identity (username left
  // empty). Exposed for tests.
  static std::optional<Identity> parse_proc_status(const std::string& contents);

private:
  std::vector<SocketRecord> tcp_sockets() const;
  std::vector<SocketRecord> udp_sockets() const;
};


// Picks the best match for `tuple` among `candidates`: an exact 5-tuple
// match, then a wildcard-remote record bound to the exact local address,
// then one bound to the unspecified address.
std::optional<SocketRecord> match_socket(
    const std::vector<SocketRecord>& candidates,
    const ConnTuple& tuple);

} // namespace uservisor

#endif // USERVISOR_INTROSPECTION_HPP
