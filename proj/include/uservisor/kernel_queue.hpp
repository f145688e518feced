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

#ifndef USERVISOR_KERNEL_QUEUE_HPP
#define USERVISOR_KERNEL_QUEUE_HPP

#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "uservisor/netid.hpp"

namespace uservisor {

class KernelQueueError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};


// Fields of an IPv4/IPv6 TCP or UDP packet that netid needs.
struct ParsedPacket
{
  ConnTuple flow;
  bool syn = false;
  bool ack = false;
  bool fin_or_rst = false;
  // IP header plus the first 8 transport bytes, quoted in ICMP errors.
  std::vector<std::uint8_t> quote;
  bool ipv6 = false;
};

// Empty for anything that is not well-formed IPv4/IPv6 TCP or UDP.
std::optional<ParsedPacket> parse_ip_packet(std::span<const std::uint8_t> packet);

// Destination-unreachable, administratively prohibited, quoting `quote`:
// ICMP type 3 code 13 with its checksum, or ICMPv6 type 1 code 1 with the
// checksum left to the kernel.
std::vector<std::uint8_t> build_icmp_prohibited(std::span<const std::uint8_t> quote,
                                                bool ipv6);


// Netfilter queue binding over raw nfnetlink. Linux only, needs
// CAP_NET_ADMIN, and an iptables/nftables rule sending new flows to
// `queue_number`.
class KernelPacketQueue final : public PacketQueueBackend
{
public:
  using PacketHandler = std::function<void(const PacketEvent&)>;

  // Throws KernelQueueError when the queue cannot be bound.
  explicit KernelPacketQueue(std::uint16_t queue_number);
  ~KernelPacketQueue() override;

  KernelPacketQueue(const KernelPacketQueue&) = delete;
  KernelPacketQueue& operator=(const KernelPacketQueue&) = delete;

  // Empty when binding would work, otherwise the reason it would not.
  static std::optional<std::string> probe(std::uint16_t queue_number);

  // Starts the receive thread; `handler` runs on it.
  void start(PacketHandler handler);
  void stop();

  void deliver_verdict(PacketRef packet, VerdictAction action) override;
  void send_unreachable(const ConnTuple& flow) override;

private:
  void receive_loop();
  void handle_packet(std::uint32_t packet_id, std::span<const std::uint8_t> payload);
  void send_config(std::uint8_t command);

  std::uint16_t queue_number_;
  int fd_ = -1;
  int raw4_ = -1;
  int raw6_ = -1;
  PacketHandler handler_;
  std::atomic<bool> stopping_{false};
  std::thread receiver_;
  std::mutex mutex_;
  std::map<ConnTuple, ParsedPacket> quotes_;
};

} // namespace uservisor

#endif // USERVISOR_KERNEL_QUEUE_HPP
