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

#ifndef USERVISOR_JSON_IO_HPP
#define USERVISOR_JSON_IO_HPP

#include <initializer_list>
#include <string>
#include <string_view>

#include <json.hpp>

#include "uservisor/ident2.hpp"
#include "uservisor/policy.hpp"

// Strict JSON mapping shared by the config file and scenario files. Every
// reader rejects keys it does not know and names the offending path.

namespace uservisor::json_io {

class JsonError : public std::invalid_argument
{
public:
  using std::invalid_argument::invalid_argument;
};

// Throws JsonError if `object` is not an object or has a key outside
// `allowed`.
void require_keys(const nlohmann::json& object,
                  std::initializer_list<std::string_view> allowed,
                  const std::string& path);

// Typed field read with the path in the error message. Range-checked for
// unsigned integers.
template <typename T>
T get(const nlohmann::json& object, const std::string& key, const std::string& path);

std::uint64_t get_unsigned(const nlohmann::json& object, const std::string& key,
                           const std::string& path, std::uint64_t max);

nlohmann::ordered_json identity_to_json(const Identity& identity);

// Reads PolicyConfig fields from `object`; absent fields keep their
// current value. Does not check for unknown keys.
void read_policy_fields(const nlohmann::json& object, const std::string& path,
                        PolicyConfig& policy);
nlohmann::ordered_json policy_to_json(const PolicyConfig& policy);

void read_peer(const nlohmann::json& object, const std::string& path, PeerPolicy& peer);
nlohmann::ordered_json peer_to_json(const PeerPolicy& peer);

} // namespace uservisor::json_io

#endif // USERVISOR_JSON_IO_HPP
