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

#ifndef USERVISOR_NET_HPP
#define USERVISOR_NET_HPP

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>

namespace uservisor {

enum class Protocol : std::uint8_t
{
  Tcp = 6,
  Udp = 17,
};

std::string_view to_string(Protocol protocol);

// Accepts "tcp"/"udp" (any case) or the IANA numbers "6"/"17".
Protocol parse_protocol(std::string_view text);

bool is_valid_protocol(std::uint8_t value);


// An IPv6 address in 16-byte canonical form. IPv4 addresses are held as
// v4-mapped (::ffff:a.b.c.d) so every comparison is a plain byte compare.
class IpAddress
{
public:
  using Bytes = std::array<std::uint8_t, 16>;

  constexpr IpAddress() = default;
  explicit constexpr IpAddress(const Bytes& bytes) : bytes_(bytes) {}

  // Parses dotted-quad IPv4 or any textual IPv6 form. Throws
  // std::invalid_argument on malformed input.
  static IpAddress parse(std::string_view text);

  static IpAddress from_v4(std::uint32_t host_order);
  static IpAddress any_v4();
  static IpAddress any_v6() { return IpAddress(); }
  static IpAddress loopback_v4();
  static IpAddress loopback_v6();

  const Bytes& bytes() const { return bytes_; }

  bool is_v4_mapped() const;
  bool is_unspecified() const;
  bool is_loopback() const;

  // IPv4 in host byte order; only meaningful when is_v4_mapped().
  std::uint32_t v4() const;

  // Dotted-quad for v4-mapped addresses, RFC 5952 text otherwise.
  std::string to_string() const;

  auto operator<=>(const IpAddress&) const = default;

private:
  Bytes bytes_{};
};


struct Endpoint
{
  IpAddress address;
  std::uint16_t port = 0;

  // "10.0.0.1:5000", "[::1]:5000". Throws std::invalid_argument.
  static Endpoint parse(std::string_view text);
  std::string to_string() const;

  auto operator<=>(const Endpoint&) const = default;
};


// One side's view of a connection: the endpoint being asked about and the
// far end it talks to.
struct ConnTuple
{
  Protocol protocol = Protocol::Tcp;
  IpAddress endpoint_addr;
  std::uint16_t endpoint_port = 0;
  IpAddress far_addr;
  std::uint16_t far_port = 0;

  ConnTuple swapped() const
  {
    return ConnTuple{protocol, far_addr, far_port, endpoint_addr, endpoint_port};
  }

  Endpoint endpoint() const { return {endpoint_addr, endpoint_port}; }
  Endpoint far() const { return {far_addr, far_port}; }

  std::string to_string() const;

  auto operator<=>(const ConnTuple&) const = default;
};


// Address range in prefix notation. IPv4 ranges are stored against the
// v4-mapped space, so "10.0.0.0/8" is ::ffff:10.0.0.0/104 internally.
class Cidr
{
public:
  Cidr() = default;
  Cidr(IpAddress network, unsigned prefix_length);

  // Throws std::invalid_argument.
  static Cidr parse(std::string_view text);

  bool contains(const IpAddress& address) const;
  std::string to_string() const;

  const IpAddress& network() const { return network_; }
  unsigned prefix_length() const { return prefix_; }

  bool operator==(const Cidr&) const = default;

private:
  IpAddress network_;
  unsigned prefix_ = 0;
  bool v4_text_ = false;
};


std::size_t hash_value(const IpAddress& address);
std::size_t hash_value(const ConnTuple& tuple);

} // namespace uservisor


template <>
struct std::hash<uservisor::IpAddress>
{
  std::size_t operator()(const uservisor::IpAddress& a) const
  {
    return uservisor::hash_value(a);
  }
};

template <>
struct std::hash<uservisor::ConnTuple>
{
  std::size_t operator()(const uservisor::ConnTuple& t) const
  {
    return uservisor::hash_value(t);
  }
};

#endif // USERVISOR_NET_HPP
