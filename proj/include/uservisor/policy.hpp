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

#ifndef USERVISOR_POLICY_HPP
#define USERVISOR_POLICY_HPP

#include <cstdint>
#include <set>
#include <string>
#include <string_view>

namespace uservisor {

using Uid = std::uint32_t;
using Gid = std::uint32_t;
using Pid = std::uint32_t;

inline constexpr std::size_t kMaxUsernameBytes = 255;
inline constexpr std::size_t kMaxSupplementalGids = 64;


// Resolved owner of one connection endpoint.
struct Identity
{
  Uid uid = 0;
  std::string username;
  Gid primary_gid = 0;
  std::set<Gid> supplemental_gids;
  Pid pid = 0;

  bool operator==(const Identity&) const = default;
};

// Throws std::invalid_argument when the username is too long or not UTF-8,
// or when there are more than kMaxSupplementalGids supplemental groups.
void validate(const Identity& identity);

bool is_valid_utf8(std::string_view text);


enum class Role
{
  Connector,
  Listener,
};


struct PolicyConfig
{
  std::set<Uid> exempt_uids;
  std::set<std::string> exempt_usernames;

  // Ports strictly below this bound count as privileged.
  std::uint32_t privileged_port_bound = 1024;

  std::uint32_t verdict_timeout_ms = 500;

  // Throws std::invalid_argument naming the offending field.
  void validate() const;

  bool operator==(const PolicyConfig&) const = default;
};


enum class Reason
{
  UserMatch,
  GroupMatch,
  PrivilegedPort,
  ExemptConnector,
  ExemptListener,
  NoRuleMatched,
};

std::string_view to_string(Reason reason);


struct Decision
{
  bool allow = false;
  Reason reason = Reason::NoRuleMatched;

  bool operator==(const Decision&) const = default;
};


enum class Preliminary
{
  AllowNow,
  NeedBoth,
};


bool is_privileged_port(std::uint16_t port, const PolicyConfig& config);

bool is_exempt(const Identity& identity, const PolicyConfig& config);

// Connector's primary or supplemental groups against the listener's primary
// group. The listener's supplemental groups play no part.
bool group_match(const Identity& connector, const Identity& listener);

// Allowed when any of the four rules holds. The reason is the first match in
// the order user, group, privileged port, exempt connector, exempt listener.
Decision evaluate(
    const Identity& connector,
    const Identity& listener,
    std::uint16_t listener_port,
    const PolicyConfig& config);

// Decides whether a single resolved endpoint is already enough to allow the
// connection. Never denies.
Preliminary preliminary_check(
    const Identity& one_end,
    Role role,
    std::uint16_t listener_port,
    const PolicyConfig& config);

// The reason reported for an AllowNow outcome of preliminary_check.
Reason preliminary_reason(
    Role role,
    std::uint16_t listener_port,
    const PolicyConfig& config);

} // namespace uservisor

#endif // USERVISOR_POLICY_HPP
