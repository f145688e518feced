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

#include "uservisor/cli.hpp"

#include <ifaddrs.h>
#include <netinet/in.h>
#include <pthread.h>
#include <signal.h>
#include <unistd.h>

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "uservisor/config.hpp"
#include "uservisor/ident2.hpp"
#include "uservisor/introspection.hpp"
#include "uservisor/ipc.hpp"
#include "uservisor/json_io.hpp"
#include "uservisor/kernel_queue.hpp"
#include "uservisor/netid.hpp"
#include "uservisor/simnet.hpp"

namespace uservisor::cli {

namespace {

struct Options
{
  std::string config_path;
  bool dump_config = false;
  std::string log_level = "warn";

  std::string backend;

  std::string proto = "tcp";
  std::string endpoint;
  std::string far;
  std::string end = "local";
  bool json = false;
  std::uint32_t timeout_ms = 2000;

  std::string scenario;
  std::string report;

  std::string threads = "1";
  std::uint32_t count = 1000;
  std::string mode = "on";
  double resolver_cost_ms = 1.0;
  std::string sizes = "1M,10M,100M";
  std::uint32_t repetitions = 3;
};


// Thrown to leave a subcommand with a given exit code after printing.
struct Exit
{
  int code;
};


Config load_config(const Options& options, std::ostream& err)
{
  std::string path = options.config_path;
  if (path.empty()) {
    if (const char* env = std::getenv("USERVISOR_CONFIG"); env != nullptr && *env) {
      path = env;
    }
  }
  try {
    Config config = path.empty() ? Config() : Config::load(path);
    if (auto warning = config.peer.check_against(config.policy.verdict_timeout_ms)) {
      spdlog::warn("{}", *warning);
    }
    return config;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    throw Exit{kExitConfig};
  }
}


std::vector<IpAddress> interface_addresses()
{
  std::vector<IpAddress> out;
  ifaddrs* list = nullptr;
  if (::getifaddrs(&list) != 0) {
    return out;
  }
  for (ifaddrs* i = list; i != nullptr; i = i->ifa_next) {
    if (i->ifa_addr == nullptr) {
      continue;
    }
    if (i->ifa_addr->sa_family == AF_INET) {
      const auto* a = reinterpret_cast<const sockaddr_in*>(i->ifa_addr);
      out.push_back(IpAddress::from_v4(ntohl(a->sin_addr.s_addr)));
    } else if (i->ifa_addr->sa_family == AF_INET6) {
      const auto* a = reinterpret_cast<const sockaddr_in6*>(i->ifa_addr);
      IpAddress::Bytes bytes;
      std::memcpy(bytes.data(), a->sin6_addr.s6_addr, 16);
      out.push_back(IpAddress(bytes));
    }
  }
  ::freeifaddrs(list);
  return out;
}


// Blocks the shutdown signals in this thread and every thread it starts;
// the caller collects them with sigwait.
sigset_t block_shutdown_signals()
{
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  sigaddset(&set, SIGUSR1);
  sigaddset(&set, SIGUSR2);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  return set;
}


std::uint64_t random_request_id()
{
  static thread_local std::mt19937_64 rng{std::random_device{}()};
  return rng();
}


// ---------------------------------------------------------------------------
// ident2d

int cmd_ident2d(const Options& options, std::ostream& out, std::ostream& err)
{
  Config config = load_config(options, err);
  if (!options.backend.empty()) {
    config.introspection = parse_backend_kind(options.backend);
  }

  std::shared_ptr<const IntrospectionBackend> backend;
  std::vector<IpAddress> local = config.local_addresses;
  if (config.introspection == BackendKind::Kernel) {
    if (!KernelIntrospection::supported()) {
      err << "ident2d: the kernel introspection backend is not supported on this platform\n";
      return kExitRuntime;
    }
    backend = std::make_shared<KernelIntrospection>();
    if (local.empty()) {
      local = interface_addresses();
    }
  } else {
    auto table = std::make_shared<SimHostTable>();
    if (!config.sim_host_table.empty()) {
      try {
        std::ifstream in(config.sim_host_table);
        if (!in) {
          throw std::invalid_argument("cannot read '" + config.sim_host_table + "'");
        }
        SimHostTable::load_json(*table, nlohmann::json::parse(in));
      } catch (const std::exception& e) {
        err << "config error: paths.sim_host_table: " << e.what() << "\n";
        return kExitConfig;
      }
    }
    backend = std::move(table);
  }

  const sigset_t signals = block_shutdown_signals();

  Ident2Config ident2_config;
  ident2_config.peer = config.peer;
  ident2_config.precache = config.precache;
  ident2_config.privileged_port_bound = config.policy.privileged_port_bound;
  ident2_config.local_addresses = local;

  ThreadExecutor executor;
  std::shared_ptr<UdpPeerSocket> peer;
  std::unique_ptr<Ident2Daemon> daemon;
  std::unique_ptr<UnixIdent2Server> server;
  try {
    peer = std::make_shared<UdpPeerSocket>(config.peer.peer_port);
    daemon = std::make_unique<Ident2Daemon>(executor, ident2_config, backend, peer);
    peer->start(executor, *daemon);
    std::error_code ec;
    std::filesystem::create_directories(
        std::filesystem::path(config.ipc_socket).parent_path(), ec);
    server = std::make_unique<UnixIdent2Server>(executor, *daemon, config.ipc_socket);
  } catch (const TransportError& e) {
    err << "ident2d: " << e.what() << "\n";
    if (peer) {
      peer->stop();
    }
    executor.stop();
    return kExitRuntime;
  }

  out << "ident2d ready ipc=" << config.ipc_socket << " peer_port=" << peer->port()
      << " backend=" << to_string(config.introspection) << std::endl;

  for (;;) {
    int signal = 0;
    sigwait(&signals, &signal);
    if (signal == SIGUSR2) {
      Ident2Stats stats;
      executor.run_sync([&] { stats = daemon->stats(); });
      out << "{\"local_queries\":" << stats.local_queries
          << ",\"peer_queries\":" << stats.peer_queries << ",\"refused\":" << stats.refused
          << ",\"relays\":" << stats.relays << ",\"cache_hits\":" << stats.cache_hits
          << ",\"backend_calls\":" << stats.backend_calls << "}" << std::endl;
      continue;
    }
    break;
  }
  server->stop();
  peer->stop();
  executor.stop();
  out << "ident2d stopped" << std::endl;
  return kExitOk;
}


// ---------------------------------------------------------------------------
// netidd

// Packet source and verdict sink on standard input and output, one JSON
// object per line.
class LinePacketQueue final : public PacketQueueBackend
{
public:
  explicit LinePacketQueue(std::ostream& out) : out_(out) {}

  void deliver_verdict(PacketRef packet, VerdictAction action) override
  {
    nlohmann::ordered_json line;
    line["packet"] = packet;
    line["verdict"] = to_string(action);
    std::lock_guard lock(mutex_);
    out_ << line.dump() << std::endl;
  }

  void send_unreachable(const ConnTuple& flow) override
  {
    nlohmann::ordered_json line;
    line["unreachable"] = flow.endpoint().to_string();
    line["flow"] = flow.to_string();
    std::lock_guard lock(mutex_);
    out_ << line.dump() << std::endl;
  }

  void print(const std::string& text)
  {
    std::lock_guard lock(mutex_);
    out_ << text << std::endl;
  }

private:
  std::ostream& out_;
  std::mutex mutex_;
};


// {"protocol": "tcp", "source": "A:P", "destination": "B:Q",
//  "initial": true, "closes": false}
PacketEvent parse_packet_line(const std::string& line, PacketRef ref)
{
  const auto j = nlohmann::json::parse(line);
  json_io::require_keys(j, {"protocol", "source", "destination", "initial", "closes"},
                        "packet");
  const Endpoint source = Endpoint::parse(json_io::get<std::string>(j, "source", "packet"));
  const Endpoint destination =
      Endpoint::parse(json_io::get<std::string>(j, "destination", "packet"));
  PacketEvent event;
  event.flow = ConnTuple{
      j.contains("protocol") ? parse_protocol(json_io::get<std::string>(j, "protocol", "packet"))
                             : Protocol::Tcp,
      source.address, source.port, destination.address, destination.port};
  event.is_flow_initial = j.contains("initial") ? json_io::get<bool>(j, "initial", "packet")
                                                : true;
  event.closes_flow = j.contains("closes") && json_io::get<bool>(j, "closes", "packet");
  event.packet_ref = ref;
  return event;
}


int cmd_netidd(const Options& options, std::ostream& out, std::ostream& err)
{
  Config config = load_config(options, err);
  if (!options.backend.empty()) {
    config.packet_queue = parse_backend_kind(options.backend);
  }
  if (config.packet_queue == BackendKind::Kernel) {
    if (auto problem = KernelPacketQueue::probe(config.queue_number)) {
      err << "netidd: kernel packet queue unavailable: " << *problem << "\n";
      return kExitRuntime;
    }
  }

  const sigset_t signals = block_shutdown_signals();
  ThreadExecutor executor;
  std::unique_ptr<UnixIdent2Client> client;
  try {
    client = std::make_unique<UnixIdent2Client>(config.ipc_socket, &executor);
  } catch (const TransportError& e) {
    err << "netidd: ident2 unreachable: " << e.what() << "\n";
    executor.stop();
    return kExitRuntime;
  }

  NetidConfig netid_config;
  netid_config.policy = config.policy;
  netid_config.queue_capacity = config.queue_capacity;
  netid_config.udp_ttl = std::chrono::seconds(config.udp_ttl_s);

  LinePacketQueue lines(out);
  std::unique_ptr<KernelPacketQueue> kernel;
  PacketQueueBackend* queue = &lines;
  if (config.packet_queue == BackendKind::Kernel) {
    try {
      kernel = std::make_unique<KernelPacketQueue>(config.queue_number);
    } catch (const KernelQueueError& e) {
      err << "netidd: " << e.what() << "\n";
      executor.stop();
      return kExitRuntime;
    }
    queue = kernel.get();
  }
  auto netid = std::make_unique<Netid>(executor, netid_config, *client, *queue);

  // Periodic conntrack expiry.
  std::function<void()> gc;
  gc = [&] {
    netid->conntrack_gc(executor.now());
    executor.schedule_after(std::chrono::seconds(1), gc);
  };
  executor.post(gc);

  std::thread reader;
  if (kernel) {
    kernel->start([&](const PacketEvent& event) {
      executor.post([&, event] {
        PacketEvent e = event;
        e.arrival = executor.now();
        netid->on_packet(e);
      });
    });
  } else {
    reader = std::thread([&] {
      std::string line;
      PacketRef next = 1;
      while (std::getline(std::cin, line)) {
        if (line.empty()) {
          continue;
        }
        try {
          const PacketEvent event = parse_packet_line(line, next++);
          executor.post([&, event] {
            PacketEvent e = event;
            e.arrival = executor.now();
            const Admission admission = netid->on_packet(e);
            if (admission == Admission::DroppedOverflow) {
              spdlog::debug("netidd: packet {} dropped on overflow", e.packet_ref);
            }
          });
        } catch (const std::exception& e) {
          spdlog::error("netidd: bad packet line: {}", e.what());
        }
      }
      // Input closed: let outstanding adjudications finish, then stop.
      const auto deadline = std::chrono::steady_clock::now() +
                            std::chrono::milliseconds(config.policy.verdict_timeout_ms + 200);
      for (;;) {
        std::size_t pending = 0;
        executor.run_sync([&] { pending = netid->pending(); });
        if (pending == 0 || std::chrono::steady_clock::now() > deadline) {
          break;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(5));
      }
      ::kill(::getpid(), SIGUSR1);
    });
  }

  lines.print("netidd ready backend=" + std::string(to_string(config.packet_queue)) +
              " queue_capacity=" + std::to_string(config.queue_capacity));

  for (;;) {
    int signal = 0;
    sigwait(&signals, &signal);
    if (signal == SIGUSR2) {
      std::string metrics;
      executor.run_sync([&] { metrics = netid->metrics().to_json().dump(); });
      lines.print(metrics);
      continue;
    }
    break;
  }

  if (kernel) {
    kernel->stop();
  }
  std::string metrics;
  executor.run_sync([&] {
    netid->shutdown();
    metrics = netid->metrics().to_json().dump();
  });
  lines.print(metrics);
  executor.stop();
  if (reader.joinable()) {
    reader.detach();
  }
  lines.print("netidd stopped");
  return kExitOk;
}


// ---------------------------------------------------------------------------
// query

int cmd_query(const Options& options, std::ostream& out, std::ostream& err)
{
  const Config config = load_config(options, err);
  wire::Query query;
  try {
    const Endpoint endpoint = Endpoint::parse(options.endpoint);
    const Endpoint far = Endpoint::parse(options.far);
    query.tuple = ConnTuple{parse_protocol(options.proto), endpoint.address, endpoint.port,
                            far.address, far.port};
  } catch (const std::invalid_argument& e) {
    err << "query: " << e.what() << "\n";
    return kExitConfig;
  }
  if (options.end != "local" && options.end != "remote") {
    err << "query: --end must be local or remote\n";
    return kExitConfig;
  }
  query.target = options.end == "local" ? wire::Target::LocalEnd : wire::Target::RemoteEnd;
  query.request_id = random_request_id();

  std::optional<wire::Reply> reply;
  try {
    UnixIdent2Client client(config.ipc_socket);
    reply = client.request(query, std::chrono::milliseconds(options.timeout_ms));
  } catch (const TransportError& e) {
    err << "query: ident2 unreachable: " << e.what() << "\n";
    return kExitRuntime;
  }
  if (!reply) {
    err << "query: no reply from ident2 within " << options.timeout_ms << " ms\n";
    return kExitRuntime;
  }

  const char* status = "ok";
  switch (reply->status) {
    case wire::ReplyStatus::Ok: status = "ok"; break;
    case wire::ReplyStatus::NotFound: status = "not found"; break;
    case wire::ReplyStatus::Refused: status = "refused"; break;
    case wire::ReplyStatus::Error: status = "error"; break;
  }
  if (options.json) {
    nlohmann::ordered_json j;
    j["request_id"] = reply->request_id;
    j["status"] = status;
    j["identity"] = reply->identity ? json_io::identity_to_json(*reply->identity)
                                    : nlohmann::ordered_json(nullptr);
    out << j.dump() << "\n";
  } else if (reply->identity) {
    const Identity& id = *reply->identity;
    out << query.tuple.to_string() << " " << options.end << ": uid=" << id.uid << "("
        << id.username << ") gid=" << id.primary_gid << " groups=";
    bool first = true;
    for (Gid g : id.supplemental_gids) {
      out << (first ? "" : ",") << g;
      first = false;
    }
    out << " pid=" << id.pid << "\n";
  } else {
    out << query.tuple.to_string() << " " << options.end << ": " << status << "\n";
  }

  switch (reply->status) {
    case wire::ReplyStatus::Ok: return kExitOk;
    case wire::ReplyStatus::NotFound:
    case wire::ReplyStatus::Refused: return kExitMismatch;
    case wire::ReplyStatus::Error: return kExitRuntime;
  }
  return kExitRuntime;
}


// ---------------------------------------------------------------------------
// simulate

int write_json(const std::string& path, const nlohmann::ordered_json& document,
               std::ostream& out, std::ostream& err)
{
  if (path.empty() || path == "-") {
    out << document.dump(2) << "\n";
    return kExitOk;
  }
  std::ofstream file(path);
  file << document.dump(2) << "\n";
  if (!file) {
    err << "cannot write report '" << path << "'\n";
    return kExitRuntime;
  }
  return kExitOk;
}


int cmd_simulate(const Options& options, std::ostream& out, std::ostream& err)
{
  sim::Scenario scenario;
  try {
    scenario = sim::Scenario::load(options.scenario);
  } catch (const sim::ScenarioError& e) {
    err << "scenario error: " << e.what() << "\n";
    return kExitConfig;
  }
  const sim::ScenarioReport report = sim::run_scenario(scenario);
  if (const int rc = write_json(options.report, report.to_json(), out, err); rc != kExitOk) {
    return rc;
  }
  for (const auto& failure : report.failures()) {
    err << "FAIL " << failure << "\n";
  }
  if (!options.report.empty() && options.report != "-") {
    out << report.results.size() << " attempts, " << report.failures().size()
        << " failed\n";
  }
  return report.all_passed() ? kExitOk : kExitMismatch;
}


// ---------------------------------------------------------------------------
// bench

std::vector<std::uint32_t> parse_thread_list(const std::string& text)
{
  std::vector<std::uint32_t> out;
  std::stringstream items(text);
  std::string item;
  while (std::getline(items, item, ',')) {
    const auto dash = item.find('-');
    try {
      if (dash == std::string::npos) {
        out.push_back(static_cast<std::uint32_t>(std::stoul(item)));
      } else {
        const auto lo = std::stoul(item.substr(0, dash));
        const auto hi = std::stoul(item.substr(dash + 1));
        for (auto n = lo; n <= hi; ++n) {
          out.push_back(static_cast<std::uint32_t>(n));
        }
      }
    } catch (const std::logic_error&) {
      throw std::invalid_argument("bad thread count '" + item + "'");
    }
  }
  for (auto n : out) {
    if (n < 1 || n > 64) {
      throw std::invalid_argument("thread counts must be in [1, 64]");
    }
  }
  if (out.empty()) {
    throw std::invalid_argument("no thread counts given");
  }
  return out;
}


int cmd_bench(const std::string& kind, const Options& options, std::ostream& out,
              std::ostream& err)
{
  sim::BenchOptions bench;
  sim::BenchMode mode;
  try {
    mode = sim::parse_bench_mode(options.mode);
    if (options.resolver_cost_ms < 0 || options.resolver_cost_ms > 1000) {
      throw std::invalid_argument("--resolver-cost-ms must be in [0, 1000]");
    }
    bench.resolver_cost = std::chrono::duration_cast<Duration>(
        std::chrono::duration<double, std::milli>(options.resolver_cost_ms));
  } catch (const std::invalid_argument& e) {
    err << "bench: " << e.what() << "\n";
    return kExitConfig;
  }

  sim::BenchReport report;
  try {
    if (kind == "connections") {
      const auto threads = parse_thread_list(options.threads);
      report = sim::bench_connections(threads, options.count, mode, bench);
    } else {
      if (mode == sim::BenchMode::Precache) {
        err << "bench: throughput supports --mode off or on\n";
        return kExitConfig;
      }
      report = sim::bench_throughput(sim::parse_sizes(options.sizes), mode, bench,
                                     options.repetitions);
    }
  } catch (const std::invalid_argument& e) {
    err << "bench: " << e.what() << "\n";
    return kExitConfig;
  }
  return write_json(options.report, report.to_json(), out, err);
}

} // namespace


int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err)
{
  Options options;
  CLI::App app{"User-based firewall daemons, identity queries and simulation", "uservisor"};
  app.require_subcommand(1);
  app.add_option("--config", options.config_path,
                 "Config file (default: $USERVISOR_CONFIG, else built-in defaults)");
  app.add_flag("--dump-config", options.dump_config,
               "Print the effective configuration as JSON and exit");
  app.add_option("--log-level", options.log_level, "trace, debug, info, warn, error or off");

  auto* ident2d = app.add_subcommand("ident2d", "Run the identity daemon");
  ident2d->add_option("--backend", options.backend, "Introspection backend")
      ->check(CLI::IsMember({"sim", "kernel"}));

  auto* netidd = app.add_subcommand("netidd", "Run the verdict daemon");
  netidd->add_option("--backend", options.backend, "Packet-queue backend")
      ->check(CLI::IsMember({"sim", "kernel"}));

  auto* query = app.add_subcommand("query", "Ask ident2 who owns one end of a connection");
  query->add_option("--proto", options.proto, "tcp or udp")
      ->check(CLI::IsMember({"tcp", "udp"}));
  query->add_option("--endpoint", options.endpoint, "A:P or [v6]:P")->required();
  query->add_option("--far", options.far, "B:Q or [v6]:Q")->required();
  query->add_option("--end", options.end, "local or remote")
      ->check(CLI::IsMember({"local", "remote"}));
  query->add_flag("--json", options.json, "Print the reply as JSON");
  query->add_option("--timeout-ms", options.timeout_ms, "Reply timeout");

  auto* simulate = app.add_subcommand("simulate", "Run a scenario file");
  simulate->add_option("--scenario", options.scenario, "Scenario JSON")->required();
  simulate->add_option("--report", options.report, "Report path (default: stdout)");

  auto* bench = app.add_subcommand("bench", "Run a benchmark");
  bench->require_subcommand(1);
  auto* connections = bench->add_subcommand("connections", "New connections per thread");
  connections->add_option("--threads", options.threads, "N, a list 1,2,4 or a range 1-5");
  connections->add_option("--count", options.count, "Connections per thread")
      ->check(CLI::Range(1u, 60000u));
  connections->add_option("--mode", options.mode, "off, on or precache");
  connections->add_option("--resolver-cost-ms", options.resolver_cost_ms,
                          "Injected cost of each backend resolution");
  connections->add_option("--report", options.report, "Report path (default: stdout)");
  auto* throughput = bench->add_subcommand("throughput", "Bulk transfer time");
  throughput->add_option("--sizes", options.sizes, "Comma-separated sizes, e.g. 1M,100M");
  throughput->add_option("--mode", options.mode, "off or on");
  throughput->add_option("--resolver-cost-ms", options.resolver_cost_ms,
                         "Injected cost of each backend resolution");
  throughput->add_option("--repetitions", options.repetitions, "Best of N")
      ->check(CLI::Range(1u, 100u));
  throughput->add_option("--report", options.report, "Report path (default: stdout)");

  app.allow_extras(false);
  try {
    // --dump-config needs no subcommand.
    bool wants_dump = false;
    for (int i = 1; i < argc; ++i) {
      wants_dump = wants_dump || std::string_view(argv[i]) == "--dump-config";
    }
    if (wants_dump) {
      app.require_subcommand(0, 1);
    }
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitConfig;
  }

  if (auto level = spdlog::level::from_str(options.log_level);
      level != spdlog::level::off || options.log_level == "off") {
    spdlog::set_level(level);
  }

  try {
    if (options.dump_config) {
      out << load_config(options, err).to_json().dump(2) << "\n";
      return kExitOk;
    }
    if (*ident2d) return cmd_ident2d(options, out, err);
    if (*netidd) return cmd_netidd(options, out, err);
    if (*query) return cmd_query(options, out, err);
    if (*simulate) return cmd_simulate(options, out, err);
    if (*connections) return cmd_bench("connections", options, out, err);
    if (*throughput) return cmd_bench("throughput", options, out, err);
  } catch (const Exit& e) {
    return e.code;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}

} // namespace uservisor::cli
