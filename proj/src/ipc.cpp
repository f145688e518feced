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

#include "uservisor/ipc.hpp"

#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/stat.h>
#include <sys/un.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <future>

#include <spdlog/spdlog.h>

namespace uservisor {

namespace {

constexpr int kPollMs = 100;

std::string errno_text(const std::string& what)
{
  return what + ": " + std::strerror(errno);
}


bool write_all(int fd, std::span<const std::uint8_t> bytes)
{
  std::size_t done = 0;
  while (done < bytes.size()) {
    const ssize_t n = ::send(fd, bytes.data() + done, bytes.size() - done, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) {
        continue;
      }
      return false;
    }
    done += static_cast<std::size_t>(n);
  }
  return true;
}


// Waits until `fd` is readable or `stopping` is set. False when stopping.
bool wait_readable(int fd, const std::atomic<bool>& stopping)
{
  while (!stopping.load()) {
    pollfd p{fd, POLLIN, 0};
    const int r = ::poll(&p, 1, kPollMs);
    if (r > 0) {
      return true;
    }
    if (r < 0 && errno != EINTR) {
      return false;
    }
  }
  return false;
}


sockaddr_un unix_address(const std::string& path)
{
  sockaddr_un address{};
  address.sun_family = AF_UNIX;
  if (path.size() >= sizeof(address.sun_path)) {
    throw TransportError("socket path too long: " + path);
  }
  std::memcpy(address.sun_path, path.c_str(), path.size() + 1);
  return address;
}


sockaddr_in6 inet6_address(const IpAddress& address, std::uint16_t port)
{
  sockaddr_in6 out{};
  out.sin6_family = AF_INET6;
  out.sin6_port = htons(port);
  std::memcpy(out.sin6_addr.s6_addr, address.bytes().data(), 16);
  return out;
}

} // namespace


// ---------------------------------------------------------------------------
// UnixIdent2Server

struct UnixIdent2Server::Connection
{
  int fd = -1;
  std::mutex write_mutex;
  std::atomic<bool> open{true};

  void write_frame(std::span<const std::uint8_t> frame)
  {
    const auto bytes = wire::length_prefixed(frame);
    std::lock_guard lock(write_mutex);
    if (open.load() && !write_all(fd, bytes)) {
      open.store(false);
    }
  }
};


UnixIdent2Server::UnixIdent2Server(Executor& executor, Ident2Daemon& daemon,
                                   std::string path, unsigned mode)
  : executor_(executor), daemon_(daemon), path_(std::move(path))
{
  const sockaddr_un address = unix_address(path_);
  listen_fd_ = ::socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (listen_fd_ < 0) {
    throw TransportError(errno_text("socket"));
  }
  ::unlink(path_.c_str());
  if (::bind(listen_fd_, reinterpret_cast<const sockaddr*>(&address), sizeof(address)) != 0) {
    const std::string message = errno_text("bind " + path_);
    ::close(listen_fd_);
    throw TransportError(message);
  }
  ::chmod(path_.c_str(), mode);
  if (::listen(listen_fd_, 64) != 0) {
    const std::string message = errno_text("listen " + path_);
    ::close(listen_fd_);
    throw TransportError(message);
  }
  acceptor_ = std::thread([this] { accept_loop(); });
}


UnixIdent2Server::~UnixIdent2Server()
{
  stop();
}


void UnixIdent2Server::stop()
{
  if (stopping_.exchange(true)) {
    return;
  }
  if (acceptor_.joinable()) {
    acceptor_.join();
  }
  std::vector<std::thread> readers;
  {
    std::lock_guard lock(mutex_);
    readers.swap(readers_);
  }
  for (auto& r : readers) {
    r.join();
  }
  ::close(listen_fd_);
  ::unlink(path_.c_str());
}


void UnixIdent2Server::accept_loop()
{
  while (wait_readable(listen_fd_, stopping_)) {
    const int fd = ::accept4(listen_fd_, nullptr, nullptr, SOCK_CLOEXEC);
    if (fd < 0) {
      continue;
    }
    auto connection = std::make_shared<Connection>();
    connection->fd = fd;
    std::lock_guard lock(mutex_);
    connections_.push_back(connection);
    readers_.emplace_back([this, connection] { serve(connection); });
  }
}


void UnixIdent2Server::serve(std::shared_ptr<Connection> connection)
{
  wire::FrameReader reader;
  std::vector<std::uint8_t> buffer(4096);
  while (connection->open.load() && wait_readable(connection->fd, stopping_)) {
    const ssize_t n = ::recv(connection->fd, buffer.data(), buffer.size(), 0);
    if (n <= 0) {
      if (n < 0 && errno == EINTR) {
        continue;
      }
      break;
    }
    reader.feed(std::span(buffer.data(), static_cast<std::size_t>(n)));
    while (auto frame = reader.next()) {
      std::weak_ptr<Connection> weak = connection;
      executor_.post([this, weak, frame = std::move(*frame)] {
        daemon_.handle_local_frame(frame, [weak](std::vector<std::uint8_t> reply) {
          if (auto c = weak.lock()) {
            c->write_frame(reply);
          }
        });
      });
    }
  }
  {
    std::lock_guard lock(connection->write_mutex);
    connection->open.store(false);
    ::close(connection->fd);
  }
  std::lock_guard lock(mutex_);
  std::erase(connections_, connection);
}


// ---------------------------------------------------------------------------
// UdpPeerSocket

UdpPeerSocket::UdpPeerSocket(std::uint16_t port, const IpAddress& bind_address)
{
  fd_ = ::socket(AF_INET6, SOCK_DGRAM | SOCK_CLOEXEC, 0);
  if (fd_ < 0) {
    throw TransportError(errno_text("socket"));
  }
  int off = 0;
  ::setsockopt(fd_, IPPROTO_IPV6, IPV6_V6ONLY, &off, sizeof(off));
  const sockaddr_in6 address = inet6_address(bind_address, port);
  if (::bind(fd_, reinterpret_cast<const sockaddr*>(&address), sizeof(address)) != 0) {
    const std::string message =
        errno_text("bind udp " + Endpoint{bind_address, port}.to_string());
    ::close(fd_);
    throw TransportError(message);
  }
  sockaddr_in6 bound{};
  socklen_t length = sizeof(bound);
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&bound), &length);
  port_ = ntohs(bound.sin6_port);
}


UdpPeerSocket::~UdpPeerSocket()
{
  stop();
  ::close(fd_);
}


void UdpPeerSocket::send_to(const Endpoint& destination,
                            std::span<const std::uint8_t> datagram)
{
  const sockaddr_in6 address = inet6_address(destination.address, destination.port);
  if (::sendto(fd_, datagram.data(), datagram.size(), 0,
               reinterpret_cast<const sockaddr*>(&address), sizeof(address)) < 0) {
    spdlog::warn("ident2: sendto {} failed: {}", destination.to_string(),
                 std::strerror(errno));
  }
}


void UdpPeerSocket::start(Executor& executor, Ident2Daemon& daemon)
{
  receiver_ = std::thread([this, &executor, &daemon] { receive_loop(executor, daemon); });
}


void UdpPeerSocket::stop()
{
  stopping_.store(true);
  if (receiver_.joinable()) {
    receiver_.join();
  }
}


void UdpPeerSocket::receive_loop(Executor& executor, Ident2Daemon& daemon)
{
  std::vector<std::uint8_t> buffer(65536);
  while (wait_readable(fd_, stopping_)) {
    sockaddr_in6 source{};
    socklen_t length = sizeof(source);
    const ssize_t n = ::recvfrom(fd_, buffer.data(), buffer.size(), 0,
                                 reinterpret_cast<sockaddr*>(&source), &length);
    if (n < 0) {
      continue;
    }
    IpAddress::Bytes bytes;
    std::memcpy(bytes.data(), source.sin6_addr.s6_addr, 16);
    const Endpoint from{IpAddress(bytes), ntohs(source.sin6_port)};
    std::vector<std::uint8_t> datagram(buffer.begin(), buffer.begin() + n);
    executor.post([this, &daemon, from, datagram = std::move(datagram)] {
      daemon.handle_peer_datagram(datagram, from, [this, from](std::vector<std::uint8_t> out) {
        send_to(from, out);
      });
    });
  }
}


// ---------------------------------------------------------------------------
// UnixIdent2Client

UnixIdent2Client::UnixIdent2Client(const std::string& path, Executor* deliver_on)
  : deliver_on_(deliver_on)
{
  const sockaddr_un address = unix_address(path);
  fd_ = ::socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (fd_ < 0) {
    throw TransportError(errno_text("socket"));
  }
  if (::connect(fd_, reinterpret_cast<const sockaddr*>(&address), sizeof(address)) != 0) {
    const std::string message = errno_text("connect " + path);
    ::close(fd_);
    throw TransportError(message);
  }
  reader_ = std::thread([this] { read_loop(); });
}


UnixIdent2Client::~UnixIdent2Client()
{
  closed_.store(true);
  ::shutdown(fd_, SHUT_RDWR);
  if (reader_.joinable()) {
    reader_.join();
  }
  ::close(fd_);
}


void UnixIdent2Client::send(const wire::Message& message, ReplyHandler on_reply)
{
  const std::uint64_t id = wire::request_id_of(message);
  {
    std::lock_guard lock(pending_mutex_);
    pending_[id] = std::move(on_reply);
  }
  const auto bytes = wire::length_prefixed(wire::encode(message));
  bool ok = false;
  {
    std::lock_guard lock(write_mutex_);
    ok = !closed_.load() && write_all(fd_, bytes);
  }
  if (!ok) {
    closed_.store(true);
    std::lock_guard lock(pending_mutex_);
    pending_.erase(id);
  }
}


std::optional<wire::Reply> UnixIdent2Client::request(const wire::Message& message,
                                                     std::chrono::milliseconds timeout)
{
  auto promise = std::make_shared<std::promise<wire::Reply>>();
  auto future = promise->get_future();
  send(message, [promise](const wire::Reply& reply) { promise->set_value(reply); });
  if (future.wait_for(timeout) != std::future_status::ready) {
    std::lock_guard lock(pending_mutex_);
    pending_.erase(wire::request_id_of(message));
    return std::nullopt;
  }
  return future.get();
}


void UnixIdent2Client::read_loop()
{
  wire::FrameReader reader;
  std::vector<std::uint8_t> buffer(4096);
  while (!closed_.load()) {
    const ssize_t n = ::recv(fd_, buffer.data(), buffer.size(), 0);
    if (n <= 0) {
      if (n < 0 && errno == EINTR) {
        continue;
      }
      break;
    }
    reader.feed(std::span(buffer.data(), static_cast<std::size_t>(n)));
    while (auto frame = reader.next()) {
      wire::Reply reply;
      try {
        auto message = wire::decode(*frame);
        const auto* r = std::get_if<wire::Reply>(&message);
        if (r == nullptr) {
          continue;
        }
        reply = *r;
      } catch (const wire::FrameError& e) {
        spdlog::warn("ident2 client: undecodable frame: {}", e.what());
        continue;
      }
      ReplyHandler handler;
      {
        std::lock_guard lock(pending_mutex_);
        auto it = pending_.find(reply.request_id);
        if (it == pending_.end()) {
          continue;
        }
        handler = std::move(it->second);
        pending_.erase(it);
      }
      if (deliver_on_ != nullptr) {
        deliver_on_->post([handler = std::move(handler), reply] { handler(reply); });
      } else {
        handler(reply);
      }
    }
  }
  closed_.store(true);
}

} // namespace uservisor
