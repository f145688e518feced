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

#include "uservisor/policy.hpp"

#include <stdexcept>

namespace uservisor {

bool is_valid_utf8(std::string_view text)
{
  std::size_t i = 0;
  while (i < text.size()) {
    const auto lead = static_cast<unsigned char>(text[i]);
    std::size_t length = 0;
    std::uint32_t code = 0;
    if (lead < 0x80) {
      ++i;
      continue;
    } else if ((lead & 0xe0) == 0xc0) {
      length = 2;
      code = lead & 0x1f;
    } else if ((lead & 0xf0) == 0xe0) {
      length = 3;
      code = lead & 0x0f;
    } else if ((lead & 0xf8) == 0xf0) {
      length = 4;
      code = lead & 0x07;
    } else {
      return false;
    }
    if (i + length > text.size()) {
      return false;
    }
    for (std::size_t k = 1; k < length; ++k) {
      const auto c = static_cast<unsigned char>(text[i + k]);
      if ((c & 0xc0) != 0x80) {
        return false;
      }
      code = (code << 6) | (c & 0x3f);
    }
    // Overlong forms, surrogates and out-of-range scalars.
    if ((length == 2 && code < 0x80) || (length == 3 && code < 0x800) ||
        (length == 4 && code < 0x10000) || code > 0x10ffff ||
        (code >= 0xd800 && code <= 0xdfff)) {
      return false;
    }
    i += length;
  }
  return true;
}


void validate(const Identity& identity)
{
  if (identity.username.size() > kMaxUsernameBytes) {
    throw std::invalid_argument(
        "username exceeds " + std::to_string(kMaxUsernameBytes) + " bytes");
  }
  if (!is_valid_utf8(identity.username)) {
    throw std::invalid_argument("username is not valid UTF-8");
  }
  if (identity.supplemental_gids.size() > kMaxSupplementalGids) {
    throw std::invalid_argument(
        "more than " + std::to_string(kMaxSupplementalGids) +
        " supplemental groups");
  }
}


void PolicyConfig::validate() const
{
  if (privileged_port_bound > 65536) {
    throw std::invalid_argument(
        "policy.privileged_port_bound must be in [0, 65536]");
  }
  if (verdict_timeout_ms == 0) {
    throw std::invalid_argument("policy.verdict_timeout_ms must be > 0");
  }
}


std::string_view to_string(Reason reason)
{
  switch (reason) {
    case Reason::UserMatch: return "UserMatch";
    case Reason::GroupMatch: return "GroupMatch";
    case Reason::PrivilegedPort: return "PrivilegedPort";
    case Reason::ExemptConnector: return "ExemptConnector";
    case Reason::ExemptListener: return "ExemptListener";
    case Reason::NoRuleMatched: return "NoRuleMatched";
  }
  return "Unknown";
}


bool is_privileged_port(std::uint16_t port, const PolicyConfig& config)
{
  return port < config.privileged_port_bound;
}


bool is_exempt(const Identity& identity, const PolicyConfig& config)
{
  return config.exempt_uids.contains(identity.uid) ||
         config.exempt_usernames.contains(identity.username);
}


bool group_match(const Identity& connector, const Identity& listener)
{
  return listener.primary_gid == connector.primary_gid ||
         connector.supplemental_gids.contains(listener.primary_gid);
}


Decision evaluate(
    const Identity& connector,
    const Identity& listener,
    std::uint16_t listener_port,
    const PolicyConfig& config)
{
  if (connector.uid == listener.uid) {
    return {true, Reason::UserMatch};
  }
  if (group_match(connector, listener)) {
    return {true, Reason::GroupMatch};
  }
  if (is_privileged_port(listener_port, config)) {
    return {true, Reason::PrivilegedPort};
  }
  if (is_exempt(connector, config)) {
    return {true, Reason::ExemptConnector};
  }
  if (is_exempt(listener, config)) {
    return {true, Reason::ExemptListener};
  }
  return {false, Reason::NoRuleMatched};
}


Preliminary preliminary_check(
    const Identity& one_end,
    Role /*role*/,
    std::uint16_t listener_port,
    const PolicyConfig& config)
{
  if (is_privileged_port(listener_port, config) || is_exempt(one_end, config)) {
    return Preliminary::AllowNow;
  }
  return Preliminary::NeedBoth;
}


Reason preliminary_reason(
    Role role,
    std::uint16_t listener_port,
    const PolicyConfig& config)
{
  if (is_privileged_port(listener_port, config)) {
    return Reason::PrivilegedPort;
  }
  return role == Role::Connector ? Reason::ExemptConnector
                                 : Reason::ExemptListener;
}

} // namespace uservisor
