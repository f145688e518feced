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

#ifndef USERVISOR_TESTS_GENERATORS_HPP
#define USERVISOR_TESTS_GENERATORS_HPP

#include <random>
#include <string>

#include "uservisor/wire.hpp"

namespace uservisor::testing {

inline IpAddress random_address(std::mt19937_64& rng)
{
  if (rng() % 2 == 0) {
    return IpAddress::from_v4(static_cast<std::uint32_t>(rng()));
  }
  IpAddress::Bytes bytes;
  for (auto& b : bytes) {
    b = static_cast<std::uint8_t>(rng());
  }
  return IpAddress(bytes);
}

inline std::string random_username(std::mt19937_64& rng)
{
  static const char* pieces[] = {"a", "b", "z", "_", "0", "\xc3\xa9", "\xe6\x97\xa5",
                                 "\xf0\x9f\x90\x8d"};
  std::string name;
  const std::size_t target = rng() % 256;
  while (true) {
    const std::string piece = pieces[rng() % 8];
    if (name.size() + piece.size() > target) {
      break;
    }
    name += piece;
  }
  return name;
}

inline Identity random_identity(std::mt19937_64& rng)
{
  Identity id;
  id.uid = static_cast<Uid>(rng());
  id.username = random_username(rng);
  id.primary_gid = static_cast<Gid>(rng());
  const std::size_t groups = rng() % 65;
  while (id.supplemental_gids.size() < groups) {
    id.supplemental_gids.insert(static_cast<Gid>(rng()));
  }
  id.pid = static_cast<Pid>(rng() % 0xfffffffe) + 1;
  return id;
}

inline ConnTuple random_tuple(std::mt19937_64& rng)
{
  return ConnTuple{rng() % 2 ? Protocol::Tcp : Protocol::Udp, random_address(rng),
                   static_cast<std::uint16_t>(rng()), random_address(rng),
                   static_cast<std::uint16_t>(rng())};
}

inline wire::Message random_message(std::mt19937_64& rng)
{
  const std::uint64_t id = rng();
  switch (rng() % 4) {
    case 0:
      return wire::Query{id, random_tuple(rng),
                         rng() % 2 ? wire::Target::LocalEnd : wire::Target::RemoteEnd};
    case 1: {
      const auto status = static_cast<wire::ReplyStatus>(rng() % 4);
      if (status == wire::ReplyStatus::Ok) {
        return wire::Reply::ok(id, random_identity(rng));
      }
      return wire::Reply::failure(id, status);
    }
    case 2: {
      const ConnTuple t = random_tuple(rng);
      return wire::Notify{id, t.protocol, t.endpoint_addr, t.endpoint_port,
                          random_identity(rng)};
    }
    default: {
      const ConnTuple t = random_tuple(rng);
      return wire::NotifyClose{id, t.protocol, t.endpoint_addr, t.endpoint_port};
    }
  }
}

} // namespace uservisor::testing

#endif // USERVISOR_TESTS_GENERATORS_HPP
