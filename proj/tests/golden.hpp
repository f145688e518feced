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

#ifndef USERVISOR_TESTS_GOLDEN_HPP
#define USERVISOR_TESTS_GOLDEN_HPP

#include <cstdint>
#include <vector>

#include "uservisor/wire.hpp"

// Frames assembled byte by byte from the documented layout.

namespace uservisor::testing {

inline std::vector<std::uint8_t> header(std::uint8_t type, std::uint64_t request_id)
{
  std::vector<std::uint8_t> out = {0x49, 0x44, 0x32, 0x01, type, 0x00, 0x00, 0x00};
  for (int shift = 56; shift >= 0; shift -= 8) {
    out.push_back(static_cast<std::uint8_t>(request_id >> shift));
  }
  return out;
}

inline void append_v4_mapped(std::vector<std::uint8_t>& out, std::uint8_t a, std::uint8_t b,
                             std::uint8_t c, std::uint8_t d)
{
  for (int i = 0; i < 10; ++i) {
    out.push_back(0x00);
  }
  out.insert(out.end(), {0xff, 0xff, a, b, c, d});
}

// QUERY id 1, TCP, endpoint 10.0.0.2:5000, far 10.0.0.1:40000, LocalEnd.
inline std::vector<std::uint8_t> golden_query()
{
  auto out = header(0x01, 1);
  out.push_back(0x06);
  out.push_back(0x00);
  append_v4_mapped(out, 10, 0, 0, 2);
  out.insert(out.end(), {0x13, 0x88});
  append_v4_mapped(out, 10, 0, 0, 1);
  out.insert(out.end(), {0x9c, 0x40});
  return out;
}

inline wire::Query golden_query_message()
{
  return wire::Query{1,
                     ConnTuple{Protocol::Tcp, IpAddress::parse("10.0.0.2"), 5000,
                               IpAddress::parse("10.0.0.1"), 40000},
                     wire::Target::LocalEnd};
}

// REPLY id 1, OK, uid 1001, pid 4242, gid 1001, groups {2000}, "alice".
inline std::vector<std::uint8_t> golden_reply()
{
  auto out = header(0x02, 1);
  out.push_back(0x00);
  out.insert(out.end(), {0x00, 0x00, 0x03, 0xe9});
  out.insert(out.end(), {0x00, 0x00, 0x10, 0x92});
  out.insert(out.end(), {0x00, 0x00, 0x03, 0xe9});
  out.insert(out.end(), {0x00, 0x01});
  out.insert(out.end(), {0x00, 0x00, 0x07, 0xd0});
  out.push_back(0x05);
  out.insert(out.end(), {'a', 'l', 'i', 'c', 'e'});
  return out;
}

inline wire::Reply golden_reply_message()
{
  return wire::Reply::ok(1, Identity{1001, "alice", 1001, {2000}, 4242});
}

// NOTIFY id 7, UDP, 10.0.0.2:5353, pid 4242, uid 1001, gid 1001, groups
// {2000, 3000}, "alice".
inline std::vector<std::uint8_t> golden_notify()
{
  auto out = header(0x03, 7);
  out.push_back(0x11);
  append_v4_mapped(out, 10, 0, 0, 2);
  out.insert(out.end(), {0x14, 0xe9});
  out.insert(out.end(), {0x00, 0x00, 0x10, 0x92});
  out.insert(out.end(), {0x00, 0x00, 0x03, 0xe9});
  out.insert(out.end(), {0x00, 0x00, 0x03, 0xe9});
  out.insert(out.end(), {0x00, 0x02});
  out.insert(out.end(), {0x00, 0x00, 0x07, 0xd0});
  out.insert(out.end(), {0x00, 0x00, 0x0b, 0xb8});
  out.push_back(0x05);
  out.insert(out.end(), {'a', 'l', 'i', 'c', 'e'});
  return out;
}

inline wire::Notify golden_notify_message()
{
  return wire::Notify{7, Protocol::Udp, IpAddress::parse("10.0.0.2"), 5353,
                      Identity{1001, "alice", 1001, {2000, 3000}, 4242}};
}

// NOTIFY_CLOSE id 7, UDP, 10.0.0.2:5353.
inline std::vector<std::uint8_t> golden_notify_close()
{
  auto out = header(0x04, 7);
  out.push_back(0x11);
  append_v4_mapped(out, 10, 0, 0, 2);
  out.insert(out.end(), {0x14, 0xe9});
  return out;
}

inline wire::NotifyClose golden_notify_close_message()
{
  return wire::NotifyClose{7, Protocol::Udp, IpAddress::parse("10.0.0.2"), 5353};
}

} // namespace uservisor::testing

#endif // USERVISOR_TESTS_GOLDEN_HPP
