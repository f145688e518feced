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

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <charconv>
#include <cstring>
#include <future>
#include <mutex>
#include <system_error>
#include <thread>
#include <unordered_map>

#include "uservisor/simnet.hpp"

namespace uservisor::sim {

std::string_view to_string(BenchMode mode)
{
  switch (mode) {
    case BenchMode::Off: return "off";
    case BenchMode::On: return "on";
    case BenchMode::Precache: return "precache";
  }
  return "unknown";
}


BenchMode parse_bench_mode(std::string_view text)
{
  if (text == "off") return BenchMode::Off;
  if (text == "on") return BenchMode::On;
  if (text == "precache") return BenchMode::Precache;
  throw std::invalid_argument("unknown bench mode '" + std::string(text) +
                              "' (expected off, on or precache)");
}


std::vector<std::uint64_t> parse_sizes(std::string_view text)
{
  std::vector<std::uint64_t> sizes;
  while (!text.empty()) {
    const auto comma = text.find(',');
    std::string_view item = text.substr(0, comma);
    text = comma == std::string_view::npos ? std::string_view() : text.substr(comma + 1);
    if (item.empty()) {
      throw std::invalid_argument("empty size in list");
    }
    std::uint64_t multiplier = 1;
    switch (item.back()) {
      case 'K': case 'k': multiplier = 1000; break;
      case 'M': case 'm': multiplier = 1000 * 1000; break;
      case 'G': case 'g': multiplier = 1000 * 1000 * 1000; break;
      default: break;
    }
    if (multiplier != 1) {
      item.remove_suffix(1);
    }
    std::uint64_t value = 0;
    const auto [end, ec] = std::from_chars(item.data(), item.data() + item.size(), value);
    if (ec != std::errc() || end != item.data() + item.size()) {
      throw std::invalid_argument("bad size '" + std::string(item) + "'");
    }
    sizes.push_back(value * multiplier);
  }
  if (sizes.empty()) {
    throw std::invalid_argument("no sizes given");
  }
  return sizes;
}


namespace {

using Clock = std::chrono::steady_clock;

constexpr Pid kServerPid = 100;
constexpr Pid kClientPid = 200;
constexpr std::size_t kChunk = 64 * 1024;


[[noreturn]] void throw_errno(const char* what)
{
  throw std::system_error(errno, std::generic_category(), what);
}

void write_all(int fd, const std::uint8_t* data, std::size_t size)
{
  while (size > 0) {
    const ssize_t n = ::send(fd, data, size, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw_errno("send");
    }
    data += n;
    size -= static_cast<std::size_t>(n);
  }
}

// Reads exactly `size` bytes unless the peer closes first; returns the count.
std::uint64_t read_upto(int fd, std::uint8_t* buffer, std::size_t buffer_size,
                        std::uint64_t size)
{
  std::uint64_t got = 0;
  while (got < size) {
    const auto want = static_cast<std::size_t>(std::min<std::uint64_t>(buffer_size, size - got));
    const ssize_t n = ::recv(fd, buffer, want, 0);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) break;
    got += static_cast<std::uint64_t>(n);
  }
  return got;
}


// Kernel TCP sink on 127.0.0.1. Each connection carries an 8-byte length
// and then that many bytes; the server closes once it has them all.
class LoopbackServer
{
public:
  LoopbackServer()
  {
    fd_ = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
    if (fd_ < 0) throw_errno("socket");
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
        ::listen(fd_, 4096) != 0) {
      const int saved = errno;
      ::close(fd_);
      errno = saved;
      throw_errno("listen");
    }
    socklen_t len = sizeof(addr);
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    thread_ = std::thread([this] { serve(); });
  }

  ~LoopbackServer()
  {
    stopping_ = true;
    ::shutdown(fd_, SHUT_RDWR);
    thread_.join();
    ::close(fd_);
  }

  std::uint16_t port() const { return port_; }
  std::uint64_t received() const { return received_.load(); }

private:
  void serve()
  {
    std::vector<std::uint8_t> buffer(kChunk);
    while (!stopping_) {
      const int conn = ::accept4(fd_, nullptr, nullptr, SOCK_CLOEXEC);
      if (conn < 0) {
        if (errno == EINTR || errno == ECONNABORTED) continue;
        break;
      }
      std::uint8_t header[8];
      if (read_upto(conn, header, sizeof(header), sizeof(header)) == sizeof(header)) {
        std::uint64_t size = 0;
        for (std::uint8_t b : header) size = (size << 8) | b;
        received_ += read_upto(conn, buffer.data(), buffer.size(), size);
      }
      ::close(conn);
    }
  }

  int fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::atomic<std::uint64_t> received_{0};
  std::thread thread_;
};


// Verdict sink that lets generator threads wait for their packet.
class WaitableQueue final : public PacketQueueBackend
{
public:
  std::future<VerdictAction> expect(PacketRef packet)
  {
    std::lock_guard lock(mutex_);
    return waiting_[packet].get_future();
  }

  void deliver_verdict(PacketRef packet, VerdictAction action) override
  {
    std::lock_guard lock(mutex_);
    auto it = waiting_.find(packet);
    if (it != waiting_.end()) {
      it->second.set_value(action);
      waiting_.erase(it);
    }
  }

  void send_unreachable(const ConnTuple&) override {}

private:
  std::mutex mutex_;
  std::unordered_map<PacketRef, std::promise<VerdictAction>> waiting_;
};


// One host on loopback: a kernel TCP server, and the host table, ident2
// and netid on a single executor thread. Nothing but the host table is
// touched off that thread.
class BenchHost
{
public:
  BenchHost(BenchMode mode, const BenchOptions& options) : mode_(mode)
  {
    ProcessRecord server{kServerPid, 1001, "alice", 1001, {}, {}};
    ProcessRecord client{kClientPid, 1001, "alice", 1001, {}, {}};
    table_->add_process(server);
    table_->add_process(client);
    table_->open_socket(kServerPid, Protocol::Tcp, IpAddress::any_v4(), server_.port());

    if (mode_ == BenchMode::Off) {
      return;
    }

    Ident2Config ident2_config;
    ident2_config.local_addresses = {IpAddress::loopback_v4()};
    ident2_config.resolver_cost = options.resolver_cost;
    daemon_ = std::make_unique<Ident2Daemon>(executor_, ident2_config, table_, nullptr);
    client_ = std::make_unique<InProcessIdent2Client>(executor_, *daemon_);

    NetidConfig netid_config;
    netid_config.policy.verdict_timeout_ms = options.verdict_timeout_ms;
    netid_config.queue_capacity = 1024;
    netid_ = std::make_unique<Netid>(executor_, netid_config, *client_, queue_);

    if (mode_ == BenchMode::Precache) {
      notify(Protocol::Tcp, IpAddress::any_v4(), server_.port(), server.identity());
    }
  }

  ~BenchHost()
  {
    executor_.run_sync([this] {
      if (netid_) {
        netid_->shutdown();
      }
    });
    executor_.stop();
  }

  // One connection: bind, optional NOTIFY, SYN adjudication, connect,
  // send the payload, wait for the server's close.
  void connect_once(std::uint64_t payload_bytes)
  {
    const IpAddress lo = IpAddress::loopback_v4();
    const int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
    if (fd < 0) throw_errno("socket");
    struct Closer
    {
      int fd;
      ~Closer() { ::close(fd); }
    } closer{fd};

    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) throw_errno("bind");
    socklen_t len = sizeof(addr);
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
    const std::uint16_t source_port = ntohs(addr.sin_port);

    const SocketId client_socket =
        table_->open_socket(kClientPid, Protocol::Tcp, lo, source_port, lo, server_.port());
    if (mode_ == BenchMode::Precache) {
      notify(Protocol::Tcp, lo, source_port, Identity{1001, "alice", 1001, {}, kClientPid});
    }

    if (mode_ != BenchMode::Off) {
      const ConnTuple flow{Protocol::Tcp, lo, source_port, lo, server_.port()};
      const PacketRef ref = next_ref_.fetch_add(1);
      auto verdict = queue_.expect(ref);
      executor_.post([this, flow, ref] {
        netid_->on_packet(PacketEvent{flow, true, false, executor_.now(), ref});
      });
      if (verdict.get() != VerdictAction::Accept) {
        table_->close_socket(client_socket);
        throw std::runtime_error("bench connection " + flow.to_string() +
                                 " was not accepted");
      }
    }

    addr.sin_port = htons(server_.port());
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      table_->close_socket(client_socket);
      throw_errno("connect");
    }
    const SocketId server_socket =
        table_->open_socket(kServerPid, Protocol::Tcp, lo, server_.port(), lo, source_port);

    // Established-flow packets are accepted by conntrack ahead of the
    // queue, so the payload never reaches netid.
    std::uint8_t header[8];
    for (int i = 0; i < 8; ++i) {
      header[i] = static_cast<std::uint8_t>(payload_bytes >> (56 - 8 * i));
    }
    write_all(fd, header, sizeof(header));
    static const std::vector<std::uint8_t> chunk(kChunk, 0x5a);
    for (std::uint64_t sent = 0; sent < payload_bytes;) {
      const auto n = static_cast<std::size_t>(std::min<std::uint64_t>(kChunk, payload_bytes - sent));
      write_all(fd, chunk.data(), n);
      sent += n;
    }
    std::uint8_t eof[1];
    read_upto(fd, eof, sizeof(eof), 1);

    table_->close_socket(server_socket);
    table_->close_socket(client_socket);
    if (mode_ != BenchMode::Off) {
      // The FIN passes conntrack and closes the entry; a reused source port
      // is adjudicated again.
      const ConnTuple flow{Protocol::Tcp, lo, source_port, lo, server_.port()};
      const PacketRef ref = next_ref_.fetch_add(1);
      executor_.post([this, flow, ref] {
        netid_->on_packet(PacketEvent{flow, false, true, executor_.now(), ref});
      });
    }
    if (mode_ == BenchMode::Precache) {
      client_->send(wire::NotifyClose{next_request_id(), Protocol::Tcp, lo, source_port},
                    [](const wire::Reply&) {});
    }
  }

  std::uint64_t received() const { return server_.received(); }

  double adjudication_mean_us()
  {
    if (!netid_) {
      return 0.0;
    }
    double mean = 0.0;
    executor_.run_sync([&] {
      const auto& latency = netid_->metrics().latency;
      if (latency.count() > 0) {
        mean = std::chrono::duration<double, std::micro>(latency.total()).count() /
               static_cast<double>(latency.count());
      }
    });
    return mean;
  }

private:
  std::uint64_t next_request_id() { return request_ids_.fetch_add(1); }

  void notify(Protocol protocol, const IpAddress& address, std::uint16_t port,
              const Identity& identity)
  {
    std::promise<void> acked;
    auto done = acked.get_future();
    client_->send(wire::Notify{next_request_id(), protocol, address, port, identity},
                  [&acked](const wire::Reply&) { acked.set_value(); });
    done.get();
  }

  BenchMode mode_;
  LoopbackServer server_;
  ThreadExecutor executor_;
  std::shared_ptr<SimHostTable> table_ = std::make_shared<SimHostTable>();
  WaitableQueue queue_;
  std::unique_ptr<Ident2Daemon> daemon_;
  std::unique_ptr<InProcessIdent2Client> client_;
  std::unique_ptr<Netid> netid_;
  std::atomic<PacketRef> next_ref_{1};
  std::atomic<std::uint64_t> request_ids_{1};
};


double seconds_since(Clock::time_point start)
{
  return std::chrono::duration<double>(Clock::now() - start).count();
}

} // namespace


double time_connections(std::uint32_t threads, std::uint32_t count, BenchMode mode,
                        const BenchOptions& options, double* adjudication_mean_us)
{
  if (threads == 0) {
    throw std::invalid_argument("threads must be >= 1");
  }
  BenchHost host(mode, options);

  std::vector<std::thread> generators;
  std::vector<std::exception_ptr> errors(threads);
  const auto start = Clock::now();
  for (std::uint32_t t = 0; t < threads; ++t) {
    generators.emplace_back([&, t] {
      try {
        for (std::uint32_t i = 0; i < count; ++i) {
          host.connect_once(1);
        }
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& g : generators) {
    g.join();
  }
  const double elapsed = seconds_since(start);
  for (const auto& e : errors) {
    if (e) {
      std::rethrow_exception(e);
    }
  }
  if (adjudication_mean_us != nullptr) {
    *adjudication_mean_us = host.adjudication_mean_us();
  }
  return elapsed;
}


double time_transfer(std::uint64_t size, BenchMode mode, const BenchOptions& options,
                     double* adjudication_mean_us)
{
  BenchHost host(mode, options);
  const auto start = Clock::now();
  host.connect_once(size);
  const double elapsed = seconds_since(start);
  if (host.received() != size) {
    throw std::runtime_error("transfer lost bytes");
  }
  if (adjudication_mean_us != nullptr) {
    *adjudication_mean_us = host.adjudication_mean_us();
  }
  return elapsed;
}


BenchReport bench_connections(const std::vector<std::uint32_t>& threads,
                              std::uint32_t count, BenchMode mode,
                              const BenchOptions& options)
{
  BenchReport report;
  report.kind = "connections";
  report.mode = mode;
  report.connections_per_thread = count;
  report.resolver_cost = options.resolver_cost;
  for (std::uint32_t n : threads) {
    BenchRow row;
    row.threads = n;
    row.total_connections = std::uint64_t(n) * count;
    row.off_time_s = time_connections(n, count, BenchMode::Off, options);
    if (mode == BenchMode::Off) {
      row.time_s = row.off_time_s;
    } else {
      row.time_s = time_connections(n, count, mode, options, &row.adjudication_mean_us);
    }
    row.overhead_ratio = mode == BenchMode::Off ? 1.0 : row.time_s / row.off_time_s;
    report.rows.push_back(row);
  }
  return report;
}


BenchReport bench_throughput(const std::vector<std::uint64_t>& sizes, BenchMode mode,
                             const BenchOptions& options, std::uint32_t repetitions)
{
  BenchReport report;
  report.kind = "throughput";
  report.mode = mode;
  report.connections_per_thread = 1;
  report.resolver_cost = options.resolver_cost;
  repetitions = std::max<std::uint32_t>(repetitions, 1);
  for (std::uint64_t size : sizes) {
    BenchRow row;
    row.threads = 1;
    row.size_bytes = size;
    row.total_connections = 1;
    row.time_s = row.off_time_s = 1e300;
    // Interleave the two modes so drift hits both equally.
    for (std::uint32_t r = 0; r < repetitions; ++r) {
      row.off_time_s = std::min(row.off_time_s,
                                time_transfer(size, BenchMode::Off, options));
      if (mode != BenchMode::Off) {
        double mean = 0;
        row.time_s = std::min(row.time_s, time_transfer(size, mode, options, &mean));
        row.adjudication_mean_us = std::max(row.adjudication_mean_us, mean);
      }
    }
    if (mode == BenchMode::Off) {
      row.time_s = row.off_time_s;
    }
    row.overhead_ratio = mode == BenchMode::Off ? 1.0 : row.time_s / row.off_time_s;
    report.rows.push_back(row);
  }
  return report;
}


nlohmann::ordered_json BenchReport::to_json() const
{
  nlohmann::ordered_json out;
  out["kind"] = kind;
  out["mode"] = to_string(mode);
  out["connections_per_thread"] = connections_per_thread;
  out["injected_resolver_cost_ms"] =
      std::chrono::duration<double, std::milli>(resolver_cost).count();
  nlohmann::ordered_json table = nlohmann::ordered_json::array();
  for (const auto& row : rows) {
    nlohmann::ordered_json r;
    r["threads"] = row.threads;
    if (kind == "throughput") {
      r["size_bytes"] = row.size_bytes;
    }
    r["total_connections"] = row.total_connections;
    r["time_s"] = row.time_s;
    r["off_time_s"] = row.off_time_s;
    r["overhead_ratio"] = row.overhead_ratio;
    r["adjudication_mean_us"] = row.adjudication_mean_us;
    table.push_back(std::move(r));
  }
  out["rows"] = std::move(table);
  return out;
}

} // namespace uservisor::sim
