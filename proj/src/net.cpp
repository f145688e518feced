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

#include "uservisor/net.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstring>
#include <stdexcept>

namespace uservisor {

namespace {

constexpr std::array<std::uint8_t, 12> kV4MappedPrefix = {
    0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0xff, 0xff};

std::uint64_t fnv1a(const std::uint8_t* data, std::size_t size,
                    std::uint64_t seed = 1469598103934665603ull)
{
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= data[i];
    h *= 1099511628211ull;
  }
  return h;
}

unsigned parse_unsigned(std::string_view text, unsigned max,
                        std::string_view what)
{
  unsigned value = 0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (text.empty() || ec != std::errc() || ptr != last || value > max) {
    throw std::invalid_argument(
        "invalid " + std::string(what) + ": '" + std::string(text) + "'");
  }
  return value;
}

} // namespace


std::string_view to_string(Protocol protocol)
{
  switch (protocol) {
    case Protocol::Tcp: return "tcp";
    case Protocol::Udp: return "udp";
  }
  return "unknown";
}


Protocol parse_protocol(std::string_view text)
{
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  if (lower == "tcp" || lower == "6") {
    return Protocol::Tcp;
  }
  if (lower == "udp" || lower == "17") {
    return Protocol::Udp;
  }
  throw std::invalid_argument("unknown protocol '" + std::string(text) + "'");
}


bool is_valid_protocol(std::uint8_t value)
{
  return value == static_cast<std::uint8_t>(Protocol::Tcp) ||
         value == static_cast<std::uint8_t>(Protocol::Udp);
}


IpAddress IpAddress::parse(std::string_view text)
{
  const std::string s(text);
  in_addr v4{};
  if (inet_pton(AF_INET, s.c_str(), &v4) == 1) {
    return from_v4(ntohl(v4.s_addr));
  }
  in6_addr v6{};
  if (inet_pton(AF_INET6, s.c_str(), &v6) == 1) {
    Bytes bytes;
    std::memcpy(bytes.data(), &v6, bytes.size());
    return IpAddress(bytes);
  }
  throw std::invalid_argument("invalid IP address '" + s + "'");
}


IpAddress IpAddress::from_v4(std::uint32_t host_order)
{
  Bytes bytes{};
  std::copy(kV4MappedPrefix.begin(), kV4MappedPrefix.end(), bytes.begin());
  bytes[12] = static_cast<std::uint8_t>(host_order >> 24);
  bytes[13] = static_cast<std::uint8_t>(host_order >> 16);
  bytes[14] = static_cast<std::uint8_t>(host_order >> 8);
  bytes[15] = static_cast<std::uint8_t>(host_order);
  return IpAddress(bytes);
}


IpAddress IpAddress::any_v4()
{
  return from_v4(0);
}


IpAddress IpAddress::loopback_v4()
{
  return from_v4(0x7f000001u);
}


IpAddress IpAddress::loopback_v6()
{
  Bytes bytes{};
  bytes[15] = 1;
  return IpAddress(bytes);
}


bool IpAddress::is_v4_mapped() const
{
  return std::equal(kV4MappedPrefix.begin(), kV4MappedPrefix.end(),
                    bytes_.begin());
}


bool IpAddress::is_unspecified() const
{
  if (is_v4_mapped()) {
    return v4() == 0;
  }
  return std::all_of(bytes_.begin(), bytes_.end(),
                     [](std::uint8_t b) { return b == 0; });
}


bool IpAddress::is_loopback() const
{
  if (is_v4_mapped()) {
    return (v4() >> 24) == 127;
  }
  return *this == loopback_v6();
}


std::uint32_t IpAddress::v4() const
{
  return (std::uint32_t(bytes_[12]) << 24) | (std::uint32_t(bytes_[13]) << 16) |
         (std::uint32_t(bytes_[14]) << 8) | std::uint32_t(bytes_[15]);
}


std::string IpAddress::to_string() const
{
  char buffer[INET6_ADDRSTRLEN] = {};
  if (is_v4_mapped()) {
    in_addr v4addr{};
    v4addr.s_addr = htonl(v4());
    inet_ntop(AF_INET, &v4addr, buffer, sizeof(buffer));
  } else {
    in6_addr v6{};
    std::memcpy(&v6, bytes_.data(), bytes_.size());
    inet_ntop(AF_INET6, &v6, buffer, sizeof(buffer));
  }
  return buffer;
}


Endpoint Endpoint::parse(std::string_view text)
{
  std::string_view host;
  std::string_view port;
  if (!text.empty() && text.front() == '[') {
    const auto close = text.find(']');
    if (close == std::string_view::npos || close + 1 >= text.size() ||
        text[close + 1] != ':') {
      throw std::invalid_argument(
          "invalid endpoint '" + std::string(text) + "'");
    }
    host = text.substr(1, close - 1);
    port = text.substr(close + 2);
  } else {
    const auto colon = text.rfind(':');
    if (colon == std::string_view::npos ||
        text.find(':') != colon) {
      throw std::invalid_argument(
          "invalid endpoint '" + std::string(text) +
          "' (expected ADDR:PORT or [V6]:PORT)");
    }
    host = text.substr(0, colon);
    port = text.substr(colon + 1);
  }
  return Endpoint{IpAddress::parse(host),
                  static_cast<std::uint16_t>(parse_unsigned(port, 65535, "port"))};
}


std::string Endpoint::to_string() const
{
  if (address.is_v4_mapped()) {
    return address.to_string() + ":" + std::to_string(port);
  }
  return "[" + address.to_string() + "]:" + std::to_string(port);
}


std::string ConnTuple::to_string() const
{
  return std::string(uservisor::to_string(protocol)) + " " +
         endpoint().to_string() + " <-> " + far().to_string();
}


Cidr::Cidr(IpAddress network, unsigned prefix_length)
  : prefix_(prefix_length)
{
  if (prefix_length > 128) {
    throw std::invalid_argument("prefix length exceeds 128");
  }
  auto bytes = network.bytes();
  for (unsigned bit = prefix_length; bit < 128; ++bit) {
    bytes[bit / 8] &= static_cast<std::uint8_t>(~(0x80u >> (bit % 8)));
  }
  network_ = IpAddress(bytes);
}


Cidr Cidr::parse(std::string_view text)
{
  const auto slash = text.find('/');
  const std::string_view host = text.substr(0, slash);
  const IpAddress address = IpAddress::parse(host);
  const bool v4_text = host.find(':') == std::string_view::npos;
  const unsigned max = v4_text ? 32 : 128;
  unsigned prefix = max;
  if (slash != std::string_view::npos) {
    prefix = parse_unsigned(text.substr(slash + 1), max, "prefix length");
  }
  Cidr cidr(address, v4_text ? prefix + 96 : prefix);
  cidr.v4_text_ = v4_text;
  return cidr;
}


bool Cidr::contains(const IpAddress& address) const
{
  const auto& a = address.bytes();
  const auto& n = network_.bytes();
  const unsigned whole = prefix_ / 8;
  if (!std::equal(n.begin(), n.begin() + whole, a.begin())) {
    return false;
  }
  const unsigned rest = prefix_ % 8;
  if (rest == 0) {
    return true;
  }
  const auto mask = static_cast<std::uint8_t>(0xff00u >> rest);
  return (a[whole] & mask) == (n[whole] & mask);
}


std::string Cidr::to_string() const
{
  const unsigned shown = v4_text_ ? prefix_ - 96 : prefix_;
  return network_.to_string() + "/" + std::to_string(shown);
}


std::size_t hash_value(const IpAddress& address)
{
  return static_cast<std::size_t>(
      fnv1a(address.bytes().data(), address.bytes().size()));
}


std::size_t hash_value(const ConnTuple& tuple)
{
  std::uint8_t buffer[1 + 16 + 2 + 16 + 2];
  buffer[0] = static_cast<std::uint8_t>(tuple.protocol);
  std::memcpy(buffer + 1, tuple.endpoint_addr.bytes().data(), 16);
  buffer[17] = static_cast<std::uint8_t>(tuple.endpoint_port >> 8);
  buffer[18] = static_cast<std::uint8_t>(tuple.endpoint_port);
  std::memcpy(buffer + 19, tuple.far_addr.bytes().data(), 16);
  buffer[35] = static_cast<std::uint8_t>(tuple.far_port >> 8);
  buffer[36] = static_cast<std::uint8_t>(tuple.far_port);
  return static_cast<std::size_t>(fnv1a(buffer, sizeof(buffer)));
}

} // namespace uservisor
