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

#include "uservisor/introspection.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#if defined(__linux__)
#include <linux/inet_diag.h>
#include <linux/netlink.h>
#include <linux/sock_diag.h>
#include <netinet/in.h>
#include <pwd.h>
#include <sys/socket.h>
#include <unistd.h>
#endif

namespace uservisor {

namespace {

std::string read_file(const std::filesystem::path& path)
{
  std::ifstream in(path);
  if (!in) {
    return {};
  }
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}


// /proc/net tables print each 32-bit word of the address in host byte
// order, so the word's in-memory bytes are the network-order bytes.
std::optional<Endpoint> parse_hex_endpoint(std::string_view text)
{
  const auto colon = text.find(':');
  if (colon == std::string_view::npos) {
    return std::nullopt;
  }
  const std::string_view hex = text.substr(0, colon);
  if (hex.size() != 8 && hex.size() != 32) {
    return std::nullopt;
  }
  IpAddress::Bytes raw{};
  const std::size_t words = hex.size() / 8;
  for (std::size_t w = 0; w < words; ++w) {
    const std::uint32_t word = static_cast<std::uint32_t>(
        std::stoul(std::string(hex.substr(w * 8, 8)), nullptr, 16));
    std::memcpy(raw.data() + w * 4, &word, 4);
  }
  Endpoint endpoint;
  if (words == 1) {
    const std::uint32_t v4 = (std::uint32_t(raw[0]) << 24) |
                             (std::uint32_t(raw[1]) << 16) |
                             (std::uint32_t(raw[2]) << 8) | raw[3];
    endpoint.address = IpAddress::from_v4(v4);
  } else {
    endpoint.address = IpAddress(raw);
  }
  endpoint.port = static_cast<std::uint16_t>(
      std::stoul(std::string(text.substr(colon + 1)), nullptr, 16));
  return endpoint;
}

} // namespace


std::vector<SocketRecord> KernelIntrospection::parse_proc_net_table(
    const std::string& contents,
    Protocol protocol)
{
  std::vector<SocketRecord> records;
  std::istringstream in(contents);
  std::string line;
  std::getline(in, line); // column headings
  while (std::getline(in, line)) {
    std::istringstream fields(line);
    std::string slot, local, remote, state, queues, timer, retransmits, uid,
        timeout, inode;
    if (!(fields >> slot >> local >> remote >> state >> queues >> timer >>
          retransmits >> uid >> timeout >> inode)) {
      continue;
    }
    try {
      const auto l = parse_hex_endpoint(local);
      const auto r = parse_hex_endpoint(remote);
      if (!l || !r) {
        continue;
      }
      SocketRecord record;
      record.socket_id = std::stoull(inode);
      record.protocol = protocol;
      record.local_addr = l->address;
      record.local_port = l->port;
      record.remote_addr = r->address;
      record.remote_port = r->port;
      record.owner_uid = static_cast<Uid>(std::stoul(uid));
      records.push_back(record);
    } catch (const std::exception&) {
      continue;
    }
  }
  return records;
}


std::optional<Identity> KernelIntrospection::parse_proc_status(
    const std::string& contents)
{
  Identity identity;
  bool have_uid = false;
  bool have_gid = false;
  bool have_pid = false;
  std::istringstream in(contents);
  std::string line;
  while (std::getline(in, line)) {
    const auto colon = line.find(':');
    if (colon == std::string::npos) {
      continue;
    }
    const std::string key = line.substr(0, colon);
    std::istringstream values(line.substr(colon + 1));
    if (key == "Pid") {
      have_pid = static_cast<bool>(values >> identity.pid);
    } else if (key == "Uid" || key == "Gid") {
      // real, effective, saved, filesystem
      std::uint32_t real = 0;
      std::uint32_t effective = 0;
      if (values >> real >> effective) {
        if (key == "Uid") {
          identity.uid = effective;
          have_uid = true;
        } else {
          identity.primary_gid = effective;
          have_gid = true;
        }
      }
    } else if (key == "Groups") {
      Gid gid = 0;
      while (values >> gid) {
        identity.supplemental_gids.insert(gid);
      }
    }
  }
  if (!have_uid || !have_gid || !have_pid) {
    return std::nullopt;
  }
  return identity;
}


#if defined(__linux__)

namespace {

class Fd
{
public:
  explicit Fd(int fd) : fd_(fd) {}
  ~Fd()
  {
    if (fd_ >= 0) {
      ::close(fd_);
    }
  }
  Fd(const Fd&) = delete;
  Fd& operator=(const Fd&) = delete;
  int get() const { return fd_; }

private:
  int fd_;
};


IpAddress diag_address(int family, const __be32* words)
{
  IpAddress::Bytes raw{};
  if (family == AF_INET) {
    std::memcpy(raw.data(), words, 4);
    const std::uint32_t v4 = (std::uint32_t(raw[0]) << 24) |
                             (std::uint32_t(raw[1]) << 16) |
                             (std::uint32_t(raw[2]) << 8) | raw[3];
    return IpAddress::from_v4(v4);
  }
  std::memcpy(raw.data(), words, 16);
  return IpAddress(raw);
}


// Dumps every TCP socket of one address family with the legacy
// TCPDIAG_GETSOCK request (struct inet_diag_req).
bool dump_tcp(int family, std::vector<SocketRecord>& out)
{
  Fd fd(::socket(AF_NETLINK, SOCK_RAW | SOCK_CLOEXEC, NETLINK_INET_DIAG));
  if (fd.get() < 0) {
    return false;
  }

  struct
  {
    nlmsghdr header;
    inet_diag_req request;
  } message{};
  message.header.nlmsg_len = sizeof(message);
  message.header.nlmsg_type = TCPDIAG_GETSOCK;
  message.header.nlmsg_flags = NLM_F_REQUEST | NLM_F_DUMP;
  message.header.nlmsg_seq = 1;
  message.request.idiag_family = static_cast<std::uint8_t>(family);
  message.request.idiag_states = ~0u;

  sockaddr_nl kernel{};
  kernel.nl_family = AF_NETLINK;
  if (::sendto(fd.get(), &message, sizeof(message), 0,
               reinterpret_cast<sockaddr*>(&kernel), sizeof(kernel)) < 0) {
    return false;
  }

  std::vector<char> buffer(64 * 1024);
  for (;;) {
    const ssize_t n = ::recv(fd.get(), buffer.data(), buffer.size(), 0);
    if (n <= 0) {
      return false;
    }
    auto* header = reinterpret_cast<nlmsghdr*>(buffer.data());
    int remaining = static_cast<int>(n);
    for (; NLMSG_OK(header, remaining); header = NLMSG_NEXT(header, remaining)) {
      if (header->nlmsg_type == NLMSG_DONE) {
        return true;
      }
      if (header->nlmsg_type == NLMSG_ERROR) {
        return false;
      }
      const auto* msg = static_cast<const inet_diag_msg*>(NLMSG_DATA(header));
      SocketRecord record;
      record.socket_id = msg->idiag_inode;
      record.protocol = Protocol::Tcp;
      record.local_addr = diag_address(msg->idiag_family, msg->id.idiag_src);
      record.local_port = ntohs(msg->id.idiag_sport);
      record.remote_addr = diag_address(msg->idiag_family, msg->id.idiag_dst);
      record.remote_port = ntohs(msg->id.idiag_dport);
      record.owner_uid = msg->idiag_uid;
      out.push_back(record);
    }
  }
}

} // namespace


bool KernelIntrospection::supported()
{
  Fd fd(::socket(AF_NETLINK, SOCK_RAW | SOCK_CLOEXEC, NETLINK_INET_DIAG));
  return fd.get() >= 0 && std::filesystem::exists("/proc/net/udp");
}


std::vector<SocketRecord> KernelIntrospection::tcp_sockets() const
{
  std::vector<SocketRecord> records;
  if (dump_tcp(AF_INET, records) && dump_tcp(AF_INET6, records)) {
    return records;
  }
  // Netlink refused (restricted sandbox); the text tables hold the same rows.
  records = parse_proc_net_table(read_file("/proc/net/tcp"), Protocol::Tcp);
  auto v6 = parse_proc_net_table(read_file("/proc/net/tcp6"), Protocol::Tcp);
  records.insert(records.end(), v6.begin(), v6.end());
  if (records.empty() && !std::filesystem::exists("/proc/net/tcp")) {
    throw BackendError("neither socket diagnostics nor /proc/net/tcp available");
  }
  return records;
}


std::vector<SocketRecord> KernelIntrospection::udp_sockets() const
{
  if (!std::filesystem::exists("/proc/net/udp")) {
    throw BackendError("/proc/net/udp is not available");
  }
  auto records = parse_proc_net_table(read_file("/proc/net/udp"), Protocol::Udp);
  auto v6 = parse_proc_net_table(read_file("/proc/net/udp6"), Protocol::Udp);
  records.insert(records.end(), v6.begin(), v6.end());
  return records;
}


std::optional<SocketRecord> KernelIntrospection::find_socket(
    const ConnTuple& tuple) const
{
  const auto records =
      tuple.protocol == Protocol::Tcp ? tcp_sockets() : udp_sockets();
  // Sockets in TIME_WAIT and similar have no inode and no owner.
  std::vector<SocketRecord> live;
  std::copy_if(records.begin(), records.end(), std::back_inserter(live),
               [](const SocketRecord& r) { return r.socket_id != 0; });
  return match_socket(live, tuple);
}


std::vector<Pid> KernelIntrospection::socket_owners(SocketId socket_id) const
{
  namespace fs = std::filesystem;
  const std::string wanted = "socket:[" + std::to_string(socket_id) + "]";
  std::vector<Pid> owners;
  std::error_code ec;
  for (const auto& entry : fs::directory_iterator("/proc", ec)) {
    const std::string name = entry.path().filename().string();
    if (name.empty() || !std::all_of(name.begin(), name.end(), ::isdigit)) {
      continue;
    }
    std::error_code fd_ec;
    for (const auto& fd : fs::directory_iterator(entry.path() / "fd", fd_ec)) {
      std::error_code link_ec;
      const auto target = fs::read_symlink(fd.path(), link_ec);
      if (!link_ec && target.string() == wanted) {
        owners.push_back(static_cast<Pid>(std::stoul(name)));
        break;
      }
    }
  }
  std::sort(owners.begin(), owners.end());
  return owners;
}


std::optional<Identity> KernelIntrospection::process_identity(Pid pid) const
{
  auto identity =
      parse_proc_status(read_file("/proc/" + std::to_string(pid) + "/status"));
  if (!identity) {
    return std::nullopt;
  }
  std::vector<char> buffer(16 * 1024);
  passwd entry{};
  passwd* result = nullptr;
  if (::getpwuid_r(identity->uid, &entry, buffer.data(), buffer.size(),
                   &result) == 0 &&
      result != nullptr) {
    identity->username = result->pw_name;
  } else {
    identity->username = std::to_string(identity->uid);
  }
  if (identity->username.size() > kMaxUsernameBytes) {
    identity->username.resize(kMaxUsernameBytes);
  }
  while (identity->supplemental_gids.size() > kMaxSupplementalGids) {
    identity->supplemental_gids.erase(std::prev(identity->supplemental_gids.end()));
  }
  return identity;
}

#else

bool KernelIntrospection::supported()
{
  return false;
}

std::vector<SocketRecord> KernelIntrospection::tcp_sockets() const
{
  throw BackendError("kernel introspection is not supported on this platform");
}

std::vector<SocketRecord> KernelIntrospection::udp_sockets() const
{
  throw BackendError("kernel introspection is not supported on this platform");
}

std::optional<SocketRecord> KernelIntrospection::find_socket(const ConnTuple&) const
{
  throw BackendError("kernel introspection is not supported on this platform");
}

std::vector<Pid> KernelIntrospection::socket_owners(SocketId) const
{
  throw BackendError("kernel introspection is not supported on this platform");
}

std::optional<Identity> KernelIntrospection::process_identity(Pid) const
{
  throw BackendError("kernel introspection is not supported on this platform");
}

#endif

} // namespace uservisor
