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

#include "uservisor/kernel_queue.hpp"

#include <cerrno>
#include <cstring>

#include <spdlog/spdlog.h>

#if defined(__linux__)
#include <arpa/inet.h>
#include <linux/netfilter.h>
#include <linux/netfilter/nfnetlink.h>
#include <linux/netfilter/nfnetlink_queue.h>
#include <linux/netlink.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>
#endif

namespace uservisor {

namespace {

std::uint16_t load16(const std::uint8_t* p)
{
  return static_cast<std::uint16_t>((p[0] << 8) | p[1]);
}

IpAddress address_at(const std::uint8_t* p, bool ipv6)
{
  if (!ipv6) {
    return IpAddress::from_v4((std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
                              (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]));
  }
  IpAddress::Bytes bytes;
  std::memcpy(bytes.data(), p, 16);
  return IpAddress(bytes);
}

std::uint16_t inet_checksum(std::span<const std::uint8_t> data)
{
  std::uint32_t sum = 0;
  for (std::size_t i = 0; i + 1 < data.size(); i += 2) {
    sum += load16(&data[i]);
  }
  if (data.size() % 2 != 0) {
    sum += std::uint32_t(data.back()) << 8;
  }
  while (sum >> 16) {
    sum = (sum & 0xffff) + (sum >> 16);
  }
  return static_cast<std::uint16_t>(~sum);
}

} // namespace


std::optional<ParsedPacket> parse_ip_packet(std::span<const std::uint8_t> packet)
{
  if (packet.empty()) {
    return std::nullopt;
  }
  ParsedPacket out;
  const unsigned version = packet[0] >> 4;
  std::size_t header = 0;
  std::uint8_t protocol = 0;
  if (version == 4) {
    header = std::size_t(packet[0] & 0x0f) * 4;
    if (header < 20 || packet.size() < header) {
      return std::nullopt;
    }
    protocol = packet[9];
    out.flow.endpoint_addr = address_at(&packet[12], false);
    out.flow.far_addr = address_at(&packet[16], false);
  } else if (version == 6) {
    header = 40;
    if (packet.size() < header) {
      return std::nullopt;
    }
    // Extension headers are not followed.
    protocol = packet[6];
    out.ipv6 = true;
    out.flow.endpoint_addr = address_at(&packet[8], true);
    out.flow.far_addr = address_at(&packet[24], true);
  } else {
    return std::nullopt;
  }

  if (protocol == 6) {
    if (packet.size() < header + 20) {
      return std::nullopt;
    }
    const std::uint8_t flags = packet[header + 13];
    out.flow.protocol = Protocol::Tcp;
    out.fin_or_rst = (flags & 0x05) != 0;
    out.syn = (flags & 0x02) != 0;
    out.ack = (flags & 0x10) != 0;
  } else if (protocol == 17) {
    if (packet.size() < header + 8) {
      return std::nullopt;
    }
    out.flow.protocol = Protocol::Udp;
  } else {
    return std::nullopt;
  }
  out.flow.endpoint_port = load16(&packet[header]);
  out.flow.far_port = load16(&packet[header + 2]);
  out.quote.assign(packet.begin(), packet.begin() + static_cast<std::ptrdiff_t>(header + 8));
  return out;
}


std::vector<std::uint8_t> build_icmp_prohibited(std::span<const std::uint8_t> quote,
                                                bool ipv6)
{
  std::vector<std::uint8_t> out(8, 0);
  out[0] = ipv6 ? 1 : 3;
  out[1] = ipv6 ? 1 : 13;
  out.insert(out.end(), quote.begin(), quote.end());
  if (!ipv6) {
    const std::uint16_t sum = inet_checksum(out);
    out[2] = static_cast<std::uint8_t>(sum >> 8);
    out[3] = static_cast<std::uint8_t>(sum);
  }
  return out;
}


#if defined(__linux__)

namespace {

// Appends one netlink attribute, padded to 4 bytes.
void put_attr(std::vector<std::uint8_t>& message, std::uint16_t type, const void* data,
              std::size_t length)
{
  nlattr attr{};
  attr.nla_len = static_cast<std::uint16_t>(NLA_HDRLEN + length);
  attr.nla_type = type;
  const auto* a = reinterpret_cast<const std::uint8_t*>(&attr);
  message.insert(message.end(), a, a + sizeof(attr));
  const auto* d = static_cast<const std::uint8_t*>(data);
  message.insert(message.end(), d, d + length);
  message.resize(NLMSG_ALIGN(message.size()), 0);
}

std::vector<std::uint8_t> nfq_message(std::uint8_t type, std::uint16_t queue,
                                      std::uint16_t flags)
{
  std::vector<std::uint8_t> message(NLMSG_HDRLEN + sizeof(nfgenmsg), 0);
  auto* header = reinterpret_cast<nlmsghdr*>(message.data());
  header->nlmsg_type = static_cast<std::uint16_t>((NFNL_SUBSYS_QUEUE << 8) | type);
  header->nlmsg_flags = static_cast<std::uint16_t>(NLM_F_REQUEST | flags);
  auto* gen = reinterpret_cast<nfgenmsg*>(message.data() + NLMSG_HDRLEN);
  gen->nfgen_family = AF_UNSPEC;
  gen->version = NFNETLINK_V0;
  gen->res_id = htons(queue);
  return message;
}

void finish(std::vector<std::uint8_t>& message)
{
  reinterpret_cast<nlmsghdr*>(message.data())->nlmsg_len =
      static_cast<std::uint32_t>(message.size());
}

int open_netfilter_socket()
{
  const int fd = ::socket(AF_NETLINK, SOCK_RAW | SOCK_CLOEXEC, NETLINK_NETFILTER);
  if (fd < 0) {
    return -1;
  }
  sockaddr_nl local{};
  local.nl_family = AF_NETLINK;
  if (::bind(fd, reinterpret_cast<sockaddr*>(&local), sizeof(local)) != 0) {
    ::close(fd);
    return -1;
  }
  return fd;
}

// Sends `message` and waits for the kernel's ack. Returns 0 or an errno.
int transact(int fd, std::vector<std::uint8_t> message)
{
  finish(message);
  sockaddr_nl kernel{};
  kernel.nl_family = AF_NETLINK;
  if (::sendto(fd, message.data(), message.size(), 0,
               reinterpret_cast<sockaddr*>(&kernel), sizeof(kernel)) < 0) {
    return errno;
  }
  std::vector<std::uint8_t> buffer(8192);
  const ssize_t n = ::recv(fd, buffer.data(), buffer.size(), 0);
  if (n < 0) {
    return errno;
  }
  const auto* header = reinterpret_cast<const nlmsghdr*>(buffer.data());
  if (NLMSG_OK(header, static_cast<unsigned>(n)) && header->nlmsg_type == NLMSG_ERROR) {
    const auto* error = static_cast<const nlmsgerr*>(NLMSG_DATA(header));
    return -error->error;
  }
  return 0;
}

std::vector<std::uint8_t> config_message(std::uint16_t queue, std::uint8_t command)
{
  auto message = nfq_message(NFQNL_MSG_CONFIG, queue, NLM_F_ACK);
  nfqnl_msg_config_cmd cmd{};
  cmd.command = command;
  cmd.pf = htons(AF_UNSPEC);
  put_attr(message, NFQA_CFG_CMD, &cmd, sizeof(cmd));
  if (command == NFQNL_CFG_CMD_BIND) {
    nfqnl_msg_config_params params{};
    params.copy_range = htonl(128);
    params.copy_mode = NFQNL_COPY_PACKET;
    put_attr(message, NFQA_CFG_PARAMS, &params, sizeof(params));
  }
  return message;
}

} // namespace


std::optional<std::string> KernelPacketQueue::probe(std::uint16_t queue_number)
{
  const int fd = open_netfilter_socket();
  if (fd < 0) {
    return std::string("cannot open a netfilter netlink socket: ") + std::strerror(errno);
  }
  const int error = transact(fd, config_message(queue_number, NFQNL_CFG_CMD_BIND));
  if (error == 0) {
    transact(fd, config_message(queue_number, NFQNL_CFG_CMD_UNBIND));
  }
  ::close(fd);
  if (error != 0) {
    return "cannot bind netfilter queue " + std::to_string(queue_number) + ": " +
           std::strerror(error) + " (needs CAP_NET_ADMIN and nfnetlink_queue)";
  }
  return std::nullopt;
}


KernelPacketQueue::KernelPacketQueue(std::uint16_t queue_number)
  : queue_number_(queue_number)
{
  fd_ = open_netfilter_socket();
  if (fd_ < 0) {
    throw KernelQueueError(std::string("netfilter netlink socket: ") + std::strerror(errno));
  }
  if (const int error = transact(fd_, config_message(queue_number, NFQNL_CFG_CMD_BIND));
      error != 0) {
    ::close(fd_);
    throw KernelQueueError("bind netfilter queue " + std::to_string(queue_number) + ": " +
                           std::strerror(error));
  }
  raw4_ = ::socket(AF_INET, SOCK_RAW | SOCK_CLOEXEC, IPPROTO_ICMP);
  raw6_ = ::socket(AF_INET6, SOCK_RAW | SOCK_CLOEXEC, IPPROTO_ICMPV6);
  if (raw4_ < 0 || raw6_ < 0) {
    spdlog::warn("netid: raw ICMP socket unavailable, denials will not be signaled");
  }
}


KernelPacketQueue::~KernelPacketQueue()
{
  stop();
  transact(fd_, config_message(queue_number_, NFQNL_CFG_CMD_UNBIND));
  ::close(fd_);
  if (raw4_ >= 0) {
    ::close(raw4_);
  }
  if (raw6_ >= 0) {
    ::close(raw6_);
  }
}


void KernelPacketQueue::start(PacketHandler handler)
{
  handler_ = std::move(handler);
  receiver_ = std::thread([this] { receive_loop(); });
}


void KernelPacketQueue::stop()
{
  stopping_.store(true);
  if (receiver_.joinable()) {
    receiver_.join();
  }
}


void KernelPacketQueue::receive_loop()
{
  std::vector<std::uint8_t> buffer(65536 + 4096);
  while (!stopping_.load()) {
    pollfd p{fd_, POLLIN, 0};
    if (::poll(&p, 1, 100) <= 0) {
      continue;
    }
    const ssize_t n = ::recv(fd_, buffer.data(), buffer.size(), 0);
    if (n <= 0) {
      continue;
    }
    auto remaining = static_cast<unsigned>(n);
    for (auto* header = reinterpret_cast<nlmsghdr*>(buffer.data());
         NLMSG_OK(header, remaining); header = NLMSG_NEXT(header, remaining)) {
      if ((header->nlmsg_type & 0xff) != NFQNL_MSG_PACKET ||
          (header->nlmsg_type >> 8) != NFNL_SUBSYS_QUEUE) {
        continue;
      }
      const auto* base = static_cast<const std::uint8_t*>(NLMSG_DATA(header));
      std::size_t offset = NLMSG_ALIGN(sizeof(nfgenmsg));
      const std::size_t end = header->nlmsg_len - NLMSG_HDRLEN;
      std::optional<std::uint32_t> packet_id;
      std::span<const std::uint8_t> payload;
      while (offset + NLA_HDRLEN <= end) {
        nlattr attr;
        std::memcpy(&attr, base + offset, sizeof(attr));
        if (attr.nla_len < NLA_HDRLEN || offset + attr.nla_len > end) {
          break;
        }
        const auto* data = base + offset + NLA_HDRLEN;
        const std::size_t length = attr.nla_len - NLA_HDRLEN;
        switch (attr.nla_type & NLA_TYPE_MASK) {
          case NFQA_PACKET_HDR:
            if (length >= sizeof(nfqnl_msg_packet_hdr)) {
              nfqnl_msg_packet_hdr ph;
              std::memcpy(&ph, data, sizeof(ph));
              packet_id = ntohl(ph.packet_id);
            }
            break;
          case NFQA_PAYLOAD: payload = std::span(data, length); break;
          default: break;
        }
        offset += NLA_ALIGN(attr.nla_len);
      }
      if (packet_id) {
        handle_packet(*packet_id, payload);
      }
    }
  }
}


void KernelPacketQueue::handle_packet(std::uint32_t packet_id,
                                      std::span<const std::uint8_t> payload)
{
  auto parsed = parse_ip_packet(payload);
  if (!parsed) {
    // Not ours to judge.
    deliver_verdict(packet_id, VerdictAction::Accept);
    return;
  }
  PacketEvent event;
  event.flow = parsed->flow;
  event.is_flow_initial =
      parsed->flow.protocol == Protocol::Udp || (parsed->syn && !parsed->ack);
  event.closes_flow = parsed->fin_or_rst;
  event.packet_ref = packet_id;
  if (event.is_flow_initial) {
    std::lock_guard lock(mutex_);
    quotes_[event.flow] = std::move(*parsed);
  }
  handler_(event);
}


void KernelPacketQueue::deliver_verdict(PacketRef packet, VerdictAction action)
{
  auto message = nfq_message(NFQNL_MSG_VERDICT, queue_number_, 0);
  nfqnl_msg_verdict_hdr verdict{};
  verdict.verdict = htonl(action == VerdictAction::Accept ? NF_ACCEPT : NF_DROP);
  verdict.id = htonl(static_cast<std::uint32_t>(packet));
  put_attr(message, NFQA_VERDICT_HDR, &verdict, sizeof(verdict));
  finish(message);
  sockaddr_nl kernel{};
  kernel.nl_family = AF_NETLINK;
  if (::sendto(fd_, message.data(), message.size(), 0,
               reinterpret_cast<sockaddr*>(&kernel), sizeof(kernel)) < 0) {
    spdlog::error("netid: verdict for packet {} not delivered: {}", packet,
                  std::strerror(errno));
  }
}


void KernelPacketQueue::send_unreachable(const ConnTuple& flow)
{
  std::optional<ParsedPacket> packet;
  {
    std::lock_guard lock(mutex_);
    auto it = quotes_.find(flow);
    if (it != quotes_.end()) {
      packet = std::move(it->second);
      quotes_.erase(it);
    }
  }
  if (!packet) {
    spdlog::warn("netid: no packet to quote for {}", flow.to_string());
    return;
  }
  const auto icmp = build_icmp_prohibited(packet->quote, packet->ipv6);
  ssize_t sent = -1;
  if (!packet->ipv6 && raw4_ >= 0) {
    sockaddr_in to{};
    to.sin_family = AF_INET;
    to.sin_addr.s_addr = htonl(flow.endpoint_addr.v4());
    sent = ::sendto(raw4_, icmp.data(), icmp.size(), 0, reinterpret_cast<sockaddr*>(&to),
                    sizeof(to));
  } else if (packet->ipv6 && raw6_ >= 0) {
    sockaddr_in6 to{};
    to.sin6_family = AF_INET6;
    std::memcpy(to.sin6_addr.s6_addr, flow.endpoint_addr.bytes().data(), 16);
    sent = ::sendto(raw6_, icmp.data(), icmp.size(), 0, reinterpret_cast<sockaddr*>(&to),
                    sizeof(to));
  }
  if (sent < 0) {
    spdlog::warn("netid: ICMP toward {} not sent: {}", flow.endpoint().to_string(),
                 std::strerror(errno));
  }
}

#else

std::optional<std::string> KernelPacketQueue::probe(std::uint16_t)
{
  return std::string("netfilter queues are only available on Linux");
}

KernelPacketQueue::KernelPacketQueue(std::uint16_t queue_number)
  : queue_number_(queue_number)
{
  throw KernelQueueError("netfilter queues are only available on Linux");
}

KernelPacketQueue::~KernelPacketQueue() = default;
void KernelPacketQueue::start(PacketHandler) {}
void KernelPacketQueue::stop() {}
void KernelPacketQueue::receive_loop() {}
void KernelPacketQueue::handle_packet(std::uint32_t, std::span<const std::uint8_t>) {}
void KernelPacketQueue::deliver_verdict(PacketRef, VerdictAction) {}
void KernelPacketQueue::send_unreachable(const ConnTuple&) {}

#endif

} // namespace uservisor
