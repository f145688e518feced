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

#include "uservisor/json_io.hpp"

#include <algorithm>

namespace uservisor::json_io {

void require_keys(const nlohmann::json& object,
                  std::initializer_list<std::string_view> allowed,
                  const std::string& path)
{
  if (!object.is_object()) {
    throw JsonError(path + ": expected an object");
  }
  for (const auto& item : object.items()) {
    if (std::find(allowed.begin(), allowed.end(), item.key()) == allowed.end()) {
      throw JsonError(path + "." + item.key() + ": unknown key");
    }
  }
}


std::uint64_t get_unsigned(const nlohmann::json& object, const std::string& key,
                           const std::string& path, std::uint64_t max)
{
  const auto& value = object.at(key);
  if (!value.is_number_unsigned() &&
      !(value.is_number_integer() && value.get<std::int64_t>() >= 0)) {
    throw JsonError(path + "." + key + ": expected a non-negative integer");
  }
  const auto v = value.get<std::uint64_t>();
  if (v > max) {
    throw JsonError(path + "." + key + ": " + std::to_string(v) +
                    " exceeds " + std::to_string(max));
  }
  return v;
}


template <typename T>
T get(const nlohmann::json& object, const std::string& key, const std::string& path)
{
  if (!object.contains(key)) {
    throw JsonError(path + "." + key + ": missing");
  }
  try {
    return object.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw JsonError(path + "." + key + ": wrong type");
  }
}

template std::string get<std::string>(const nlohmann::json&, const std::string&,
                                      const std::string&);
template bool get<bool>(const nlohmann::json&, const std::string&, const std::string&);
template std::vector<std::string> get<std::vector<std::string>>(
    const nlohmann::json&, const std::string&, const std::string&);


nlohmann::ordered_json identity_to_json(const Identity& identity)
{
  nlohmann::ordered_json out;
  out["uid"] = identity.uid;
  out["username"] = identity.username;
  out["primary_gid"] = identity.primary_gid;
  out["supplemental_gids"] = identity.supplemental_gids;
  out["pid"] = identity.pid;
  return out;
}


namespace {

template <typename T>
std::set<T> read_set(const nlohmann::json& object, const std::string& key,
                     const std::string& path, std::uint64_t max)
{
  const auto& array = object.at(key);
  if (!array.is_array()) {
    throw JsonError(path + "." + key + ": expected an array");
  }
  std::set<T> out;
  for (std::size_t i = 0; i < array.size(); ++i) {
    nlohmann::json wrapper = {{"v", array[i]}};
    out.insert(static_cast<T>(
        get_unsigned(wrapper, "v", path + "." + key + "[" + std::to_string(i) + "]",
                     max)));
  }
  return out;
}

} // namespace


void read_policy_fields(const nlohmann::json& object, const std::string& path,
                        PolicyConfig& policy)
{
  if (object.contains("exempt_uids")) {
    policy.exempt_uids = read_set<Uid>(object, "exempt_uids", path, 0xffffffffu);
  }
  if (object.contains("exempt_usernames")) {
    const auto names = get<std::vector<std::string>>(object, "exempt_usernames", path);
    policy.exempt_usernames = {names.begin(), names.end()};
  }
  if (object.contains("privileged_port_bound")) {
    policy.privileged_port_bound = static_cast<std::uint32_t>(
        get_unsigned(object, "privileged_port_bound", path, 65536));
  }
  if (object.contains("verdict_timeout_ms")) {
    policy.verdict_timeout_ms = static_cast<std::uint32_t>(
        get_unsigned(object, "verdict_timeout_ms", path, 0xffffffffu));
    if (policy.verdict_timeout_ms == 0) {
      throw JsonError(path + ".verdict_timeout_ms: must be > 0");
    }
  }
}


nlohmann::ordered_json policy_to_json(const PolicyConfig& policy)
{
  nlohmann::ordered_json out;
  out["exempt_uids"] = policy.exempt_uids;
  out["exempt_usernames"] = policy.exempt_usernames;
  out["privileged_port_bound"] = policy.privileged_port_bound;
  out["verdict_timeout_ms"] = policy.verdict_timeout_ms;
  return out;
}


void read_peer(const nlohmann::json& object, const std::string& path, PeerPolicy& peer)
{
  require_keys(object, {"peer_port", "allowed_peer_cidrs", "retries", "retry_interval_ms"},
               path);
  if (object.contains("peer_port")) {
    peer.peer_port =
        static_cast<std::uint16_t>(get_unsigned(object, "peer_port", path, 65535));
  }
  if (object.contains("allowed_peer_cidrs")) {
    peer.allowed_peer_cidrs.clear();
    const auto texts = get<std::vector<std::string>>(object, "allowed_peer_cidrs", path);
    for (std::size_t i = 0; i < texts.size(); ++i) {
      try {
        peer.allowed_peer_cidrs.push_back(Cidr::parse(texts[i]));
      } catch (const std::invalid_argument& e) {
        throw JsonError(path + ".allowed_peer_cidrs[" + std::to_string(i) +
                        "]: " + e.what());
      }
    }
  }
  if (object.contains("retries")) {
    peer.retries =
        static_cast<std::uint32_t>(get_unsigned(object, "retries", path, 1000));
    if (peer.retries < 1) {
      throw JsonError(path + ".retries: must be >= 1");
    }
  }
  if (object.contains("retry_interval_ms")) {
    peer.retry_interval_ms = static_cast<std::uint32_t>(
        get_unsigned(object, "retry_interval_ms", path, 3600000));
    if (peer.retry_interval_ms < 1) {
      throw JsonError(path + ".retry_interval_ms: must be >= 1");
    }
  }
}


nlohmann::ordered_json peer_to_json(const PeerPolicy& peer)
{
  nlohmann::ordered_json out;
  out["peer_port"] = peer.peer_port;
  nlohmann::ordered_json cidrs = nlohmann::ordered_json::array();
  for (const auto& c : peer.allowed_peer_cidrs) {
    cidrs.push_back(c.to_string());
  }
  out["allowed_peer_cidrs"] = std::move(cidrs);
  out["retries"] = peer.retries;
  out["retry_interval_ms"] = peer.retry_interval_ms;
  return out;
}

} // namespace uservisor::json_io
