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

#include <stdexcept>

#include <doctest.h>

#include "uservisor/net.hpp"

using namespace uservisor;

TEST_SUITE("net")
{
  TEST_CASE("addresses are stored v4-mapped")
  {
    const IpAddress a = IpAddress::parse("10.0.0.2");
    CHECK(a.is_v4_mapped());
    CHECK(a == IpAddress::parse("::ffff:10.0.0.2"));
    CHECK(a.to_string() == "10.0.0.2");
    CHECK(a.v4() == 0x0a000002u);
    CHECK(IpAddress::parse("fe80::1").to_string() == "fe80::1");
    CHECK(IpAddress::parse("127.0.0.1").is_loopback());
    CHECK(IpAddress::parse("::1").is_loopback());
    CHECK(IpAddress::parse("0.0.0.0").is_unspecified());
    CHECK(IpAddress::parse("::").is_unspecified());
    CHECK_THROWS_AS(IpAddress::parse("10.0.0"), std::invalid_argument);
    CHECK_THROWS_AS(IpAddress::parse("nonsense"), std::invalid_argument);
  }

  TEST_CASE("endpoints")
  {
    const Endpoint e = Endpoint::parse("10.0.0.1:313");
    CHECK(e.port == 313);
    CHECK(e.to_string() == "10.0.0.1:313");
    const Endpoint v6 = Endpoint::parse("[fe80::1]:5000");
    CHECK(v6.to_string() == "[fe80::1]:5000");
    CHECK_THROWS_AS(Endpoint::parse("10.0.0.1:70000"), std::invalid_argument);
    CHECK_THROWS_AS(Endpoint::parse("10.0.0.1"), std::invalid_argument);
  }

  TEST_CASE("cidr membership")
  {
    const Cidr lan = Cidr::parse("10.0.0.0/24");
    CHECK(lan.contains(IpAddress::parse("10.0.0.200")));
    CHECK_FALSE(lan.contains(IpAddress::parse("10.0.1.1")));
    CHECK_FALSE(lan.contains(IpAddress::parse("fe80::1")));
    CHECK(Cidr::parse("::/0").contains(IpAddress::parse("10.9.9.9")));
    CHECK(Cidr::parse("fe80::/10").contains(IpAddress::parse("fe80::1")));
    CHECK(lan.to_string() == "10.0.0.0/24");
    CHECK_THROWS_AS(Cidr::parse("10.0.0.0/33"), std::invalid_argument);
  }

  TEST_CASE("tuple orientation")
  {
    const ConnTuple t{Protocol::Tcp, IpAddress::parse("10.0.0.1"), 40000,
                      IpAddress::parse("10.0.0.2"), 5000};
    CHECK(t.swapped().endpoint() == Endpoint{IpAddress::parse("10.0.0.2"), 5000});
    CHECK(t.swapped().swapped() == t);
    CHECK(std::hash<ConnTuple>{}(t) == std::hash<ConnTuple>{}(t.swapped().swapped()));
    CHECK(parse_protocol("udp") == Protocol::Udp);
    CHECK_THROWS_AS(parse_protocol("icmp"), std::invalid_argument);
  }
}
