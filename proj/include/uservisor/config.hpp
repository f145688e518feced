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

#ifndef USERVISOR_CONFIG_HPP
#define USERVISOR_CONFIG_HPP

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "uservisor/ident2.hpp"
#include "uservisor/net.hpp"
#include "uservisor/policy.hpp"

namespace uservisor {

class ConfigError : public std::invalid_argument
{
public:
  using std::invalid_argument::invalid_argument;
};


enum class BackendKind
{
  Sim,
  Kernel,
};

std::string_view to_string(BackendKind kind);
BackendKind parse_backend_kind(std::string_view text);


struct Config
{
  PolicyConfig policy;
  PeerPolicy peer;
  PrecacheConfig precache;
  std::uint32_t udp_ttl_s = 30;
  std::size_t queue_capacity = 1024;
  // Netfilter queue the kernel packet-queue backend binds.
  std::uint16_t queue_number = 0;
  // Addresses ident2 answers for besides loopback. Empty with the kernel
  // backend means the host's interface addresses.
  std::vector<IpAddress> local_addresses;
  std::string ipc_socket = "/run/uservisor/ident2.sock";
  // Host table for the sim introspection backend; empty means no processes.
  std::string sim_host_table;
  BackendKind introspection = BackendKind::Sim;
  BackendKind packet_queue = BackendKind::Sim;

  // Throws ConfigError naming the field.
  void validate() const;

  nlohmann::ordered_json to_json() const;

  // Strict: unknown keys and out-of-range values are errors. Absent keys
  // keep their defaults.
  static Config from_json(const nlohmann::json& document);
  static Config load(const std::string& path);

  bool operator==(const Config&) const;
};

} // namespace uservisor

#endif // USERVISOR_CONFIG_HPP
