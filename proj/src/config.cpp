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

#include "uservisor/config.hpp"

#include <fstream>

#include "uservisor/json_io.hpp"

namespace uservisor {

using json_io::get;
using json_io::get_unsigned;
using json_io::require_keys;

std::string_view to_string(BackendKind kind)
{
  return kind == BackendKind::Kernel ? "kernel" : "sim";
}


BackendKind parse_backend_kind(std::string_view text)
{
  if (text == "sim") return BackendKind::Sim;
  if (text == "kernel") return BackendKind::Kernel;
  throw ConfigError("unknown backend '" + std::string(text) + "' (expected sim or kernel)");
}


void Config::validate() const
{
  try {
    policy.validate();
    peer.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (peer.peer_port == 0) {
    throw ConfigError("peer.peer_port must be > 0");
  }
  if (queue_capacity == 0) {
    throw ConfigError("queue_capacity must be > 0");
  }
  if (udp_ttl_s == 0) {
    throw ConfigError("conntrack.udp_ttl_s must be > 0");
  }
  if (ipc_socket.empty()) {
    throw ConfigError("paths.ipc_socket must not be empty");
  }
}


nlohmann::ordered_json Config::to_json() const
{
  nlohmann::ordered_json out;
  out["policy"] = json_io::policy_to_json(policy);
  out["peer"] = json_io::peer_to_json(peer);
  out["precache"] = {{"capacity", precache.capacity}, {"ttl_s", precache.ttl_s}};
  out["conntrack"] = {{"udp_ttl_s", udp_ttl_s}};
  out["queue_capacity"] = queue_capacity;
  out["queue_number"] = queue_number;
  nlohmann::ordered_json addresses = nlohmann::ordered_json::array();
  for (const auto& a : local_addresses) {
    addresses.push_back(a.to_string());
  }
  out["local_addresses"] = std::move(addresses);
  out["paths"] = {{"ipc_socket", ipc_socket}, {"sim_host_table", sim_host_table}};
  out["backends"] = {{"introspection", to_string(introspection)},
                     {"packet_queue", to_string(packet_queue)}};
  return out;
}


Config Config::from_json(const nlohmann::json& document)
{
  Config c;
  try {
    require_keys(document,
                 {"policy", "peer", "precache", "conntrack", "queue_capacity",
                  "queue_number", "local_addresses", "paths", "backends"},
                 "config");
    if (document.contains("policy")) {
      const auto& p = document.at("policy");
      require_keys(p, {"exempt_uids", "exempt_usernames", "privileged_port_bound",
                       "verdict_timeout_ms"},
                   "policy");
      json_io::read_policy_fields(p, "policy", c.policy);
    }
    if (document.contains("peer")) {
      json_io::read_peer(document.at("peer"), "peer", c.peer);
    }
    if (document.contains("precache")) {
      const auto& p = document.at("precache");
      require_keys(p, {"capacity", "ttl_s"}, "precache");
      if (p.contains("capacity")) {
        c.precache.capacity = get_unsigned(p, "capacity", "precache", 1ull << 32);
      }
      if (p.contains("ttl_s")) {
        c.precache.ttl_s =
            static_cast<std::uint32_t>(get_unsigned(p, "ttl_s", "precache", 86400 * 365));
      }
    }
    if (document.contains("conntrack")) {
      const auto& p = document.at("conntrack");
      require_keys(p, {"udp_ttl_s"}, "conntrack");
      if (p.contains("udp_ttl_s")) {
        c.udp_ttl_s =
            static_cast<std::uint32_t>(get_unsigned(p, "udp_ttl_s", "conntrack", 86400));
      }
    }
    if (document.contains("queue_capacity")) {
      c.queue_capacity = get_unsigned(document, "queue_capacity", "config", 1u << 20);
    }
    if (document.contains("queue_number")) {
      c.queue_number =
          static_cast<std::uint16_t>(get_unsigned(document, "queue_number", "config", 65535));
    }
    if (document.contains("local_addresses")) {
      const auto texts = get<std::vector<std::string>>(document, "local_addresses", "config");
      for (std::size_t i = 0; i < texts.size(); ++i) {
        try {
          c.local_addresses.push_back(IpAddress::parse(texts[i]));
        } catch (const std::invalid_argument& e) {
          throw ConfigError("config.local_addresses[" + std::to_string(i) + "]: " + e.what());
        }
      }
    }
    if (document.contains("paths")) {
      const auto& p = document.at("paths");
      require_keys(p, {"ipc_socket", "sim_host_table"}, "paths");
      if (p.contains("ipc_socket")) {
        c.ipc_socket = get<std::string>(p, "ipc_socket", "paths");
      }
      if (p.contains("sim_host_table")) {
        c.sim_host_table = get<std::string>(p, "sim_host_table", "paths");
      }
    }
    if (document.contains("backends")) {
      const auto& p = document.at("backends");
      require_keys(p, {"introspection", "packet_queue"}, "backends");
      if (p.contains("introspection")) {
        c.introspection =
            parse_backend_kind(get<std::string>(p, "introspection", "backends"));
      }
      if (p.contains("packet_queue")) {
        c.packet_queue = parse_backend_kind(get<std::string>(p, "packet_queue", "backends"));
      }
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  c.validate();
  return c;
}


Config Config::load(const std::string& path)
{
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot read config file '" + path + "'");
  }
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}


bool Config::operator==(const Config& other) const
{
  return to_json() == other.to_json();
}

} // namespace uservisor
