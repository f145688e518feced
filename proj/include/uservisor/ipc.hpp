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

#ifndef USERVISOR_IPC_HPP
#define USERVISOR_IPC_HPP

#include <atomic>
#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "uservisor/executor.hpp"
#include "uservisor/ident2.hpp"
#include "uservisor/net.hpp"
#include "uservisor/wire.hpp"

// Socket transports for live daemons: the local stream socket and the UDP
// peer port.

namespace uservisor {

class TransportError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};


// Serves the ident2 local socket. Each accepted connection gets a reader
// thread; frames are handed to the daemon on its executor.
class UnixIdent2Server
{
public:
  // Binds and listens on `path`, replacing a stale socket file. Access is
  // governed by the file mode, set to `mode`.
  UnixIdent2Server(Executor& executor, Ident2Daemon& daemon, std::string path,
                   unsigned mode = 0660);
  ~UnixIdent2Server();

  UnixIdent2Server(const UnixIdent2Server&) = delete;
  UnixIdent2Server& operator=(const UnixIdent2Server&) = delete;

  void stop();

  const std::string& path() const { return path_; }

private:
  struct Connection;

  void accept_loop();
  void serve(std::shared_ptr<Connection> connection);

  Executor& executor_;
  Ident2Daemon& daemon_;
  std::string path_;
  int listen_fd_ = -1;
  std::atomic<bool> stopping_{false};
  std::thread acceptor_;
  std::mutex mutex_;
  std::vector<std::shared_ptr<Connection>> connections_;
  std::vector<std::thread> readers_;
};


// The peer port. Received datagrams go to the daemon on its executor;
// replies leave from the same socket, so from the privileged port.
class UdpPeerSocket final : public DatagramSocket
{
public:
  // Dual-stack bind on [::]:port.
  UdpPeerSocket(std::uint16_t port, const IpAddress& bind_address = IpAddress::any_v6());
  ~UdpPeerSocket() override;

  UdpPeerSocket(const UdpPeerSocket&) = delete;
  UdpPeerSocket& operator=(const UdpPeerSocket&) = delete;

  void send_to(const Endpoint& destination,
               std::span<const std::uint8_t> datagram) override;

  // Starts delivering datagrams to `daemon`. Call once, after the daemon
  // exists.
  void start(Executor& executor, Ident2Daemon& daemon);
  void stop();

  std::uint16_t port() const { return port_; }

private:
  void receive_loop(Executor& executor, Ident2Daemon& daemon);

  int fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread receiver_;
};


// Client of the local socket. Replies are matched to requests by id.
class UnixIdent2Client final : public Ident2Client
{
public:
  // Throws TransportError if the daemon is not reachable. When `deliver_on`
  // is given, reply handlers run as tasks there; otherwise on the reader
  // thread.
  explicit UnixIdent2Client(const std::string& path, Executor* deliver_on = nullptr);
  ~UnixIdent2Client() override;

  UnixIdent2Client(const UnixIdent2Client&) = delete;
  UnixIdent2Client& operator=(const UnixIdent2Client&) = delete;

  void send(const wire::Message& message, ReplyHandler on_reply) override;

  // Blocking round trip. Empty on timeout or lost connection.
  std::optional<wire::Reply> request(const wire::Message& message,
                                     std::chrono::milliseconds timeout);

  bool connected() const { return !closed_.load(); }

private:
  void read_loop();

  int fd_ = -1;
  Executor* deliver_on_;
  std::mutex write_mutex_;
  std::mutex pending_mutex_;
  std::map<std::uint64_t, ReplyHandler> pending_;
  std::atomic<bool> closed_{false};
  std::thread reader_;
};

} // namespace uservisor

#endif // USERVISOR_IPC_HPP
