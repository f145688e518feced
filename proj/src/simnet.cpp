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

#include "uservisor/simnet.hpp"

#include <fstream>
#include <sstream>

#include "uservisor/json_io.hpp"

namespace uservisor::sim {

using json_io::get;
using json_io::get_unsigned;
using json_io::require_keys;

// ---------------------------------------------------------------------------
// SimNetwork

class SimNetwork::Socket final : public DatagramSocket
{
public:
  Socket(SimNetwork& network, Endpoint local) : network_(network), local_(local) {}

  void send_to(const Endpoint& destination,
               std::span<const std::uint8_t> datagram) override
  {
    network_.deliver(local_, destination, {datagram.begin(), datagram.end()});
  }

private:
  SimNetwork& network_;
  Endpoint local_;
};


SimNetwork::SimNetwork(Executor& executor, Duration latency)
  : executor_(executor), latency_(latency)
{}


std::shared_ptr<DatagramSocket> SimNetwork::bind(const Endpoint& local, Receiver receiver)
{
  if (receiver) {
    bound_[local] = std::move(receiver);
  }
  return std::make_shared<Socket>(*this, local);
}


void SimNetwork::unbind(const Endpoint& local)
{
  bound_.erase(local);
}


void SimNetwork::deliver(const Endpoint& source, const Endpoint& destination,
                         std::vector<std::uint8_t> datagram)
{
  executor_.schedule_after(latency_, [this, source, destination,
                                      datagram = std::move(datagram)] {
    auto it = bound_.find(destination);
    if (it == bound_.end()) {
      ++lost_;
      return;
    }
    ++delivered_;
    it->second(datagram, source);
  });
}


void SimPacketQueue::deliver_verdict(PacketRef packet, VerdictAction action)
{
  verdicts_[packet] = action;
  if (listener_) {
    listener_(packet, action);
  }
}


void SimPacketQueue::send_unreachable(const ConnTuple& flow)
{
  unreachable_.push_back(flow);
}


std::optional<VerdictAction> SimPacketQueue::verdict(PacketRef packet) const
{
  if (auto it = verdicts_.find(packet); it != verdicts_.end()) {
    return it->second;
  }
  return std::nullopt;
}


// ---------------------------------------------------------------------------
// Scenario parsing

std::string_view to_string(Expect expect)
{
  switch (expect) {
    case Expect::Allow: return "allow";
    case Expect::DenyNotify: return "deny-notify";
    case Expect::DenySilent: return "deny-silent";
  }
  return "unknown";
}


namespace {

Expect parse_expect(const std::string& text, const std::string& path)
{
  if (text == "allow") return Expect::Allow;
  if (text == "deny-notify") return Expect::DenyNotify;
  if (text == "deny-silent") return Expect::DenySilent;
  throw ScenarioError(path + ": expected allow, deny-notify or deny-silent, got '" +
                      text + "'");
}


std::string at_index(const std::string& path, std::size_t i)
{
  return path + "[" + std::to_string(i) + "]";
}


const nlohmann::json& array_at(const nlohmann::json& object, const std::string& key,
                               const std::string& path, bool required = true)
{
  static const nlohmann::json empty = nlohmann::json::array();
  if (!object.contains(key)) {
    if (required) {
      throw ScenarioError(path + "." + key + ": missing");
    }
    return empty;
  }
  const auto& value = object.at(key);
  if (!value.is_array()) {
    throw ScenarioError(path + "." + key + ": expected an array");
  }
  return value;
}


ProcessRecord parse_process(const nlohmann::json& p, const std::string& path)
{
  require_keys(p, {"pid", "uid", "username", "primary_gid", "supplemental_gids"}, path);
  ProcessRecord record;
  record.pid = static_cast<Pid>(get_unsigned(p, "pid", path, 0xffffffffu));
  if (record.pid == 0) {
    throw ScenarioError(path + ".pid: must be positive");
  }
  record.uid = static_cast<Uid>(get_unsigned(p, "uid", path, 0xffffffffu));
  record.username = get<std::string>(p, "username", path);
  record.primary_gid = static_cast<Gid>(get_unsigned(p, "primary_gid", path, 0xffffffffu));
  const auto& sup = array_at(p, "supplemental_gids", path, false);
  for (std::size_t i = 0; i < sup.size(); ++i) {
    nlohmann::json wrapper = {{"v", sup[i]}};
    record.supplemental_gids.insert(static_cast<Gid>(get_unsigned(
        wrapper, "v", path + ".supplemental_gids" + at_index("", i), 0xffffffffu)));
  }
  try {
    validate(record.identity());
  } catch (const std::invalid_argument& e) {
    throw ScenarioError(path + ": " + e.what());
  }
  return record;
}


HostSpec parse_host(const nlohmann::json& h, const std::string& path)
{
  require_keys(h, {"name", "addresses", "processes", "listeners", "ident2"}, path);
  HostSpec host;
  host.name = get<std::string>(h, "name", path);
  const auto& addresses = array_at(h, "addresses", path);
  if (addresses.empty()) {
    throw ScenarioError(path + ".addresses: at least one address is required");
  }
  for (std::size_t i = 0; i < addresses.size(); ++i) {
    const std::string where = path + ".addresses" + at_index("", i);
    try {
      host.addresses.push_back(IpAddress::parse(addresses[i].get<std::string>()));
    } catch (const std::exception& e) {
      throw ScenarioError(where + ": " + e.what());
    }
  }
  const auto& processes = array_at(h, "processes", path, false);
  for (std::size_t i = 0; i < processes.size(); ++i) {
    host.processes.push_back(parse_process(processes[i], at_index(path + ".processes", i)));
  }
  const auto& listeners = array_at(h, "listeners", path, false);
  for (std::size_t i = 0; i < listeners.size(); ++i) {
    const std::string where = at_index(path + ".listeners", i);
    const auto& l = listeners[i];
    require_keys(l, {"pid", "port", "protocol", "address"}, where);
    ListenerSpec spec;
    spec.pid = static_cast<Pid>(get_unsigned(l, "pid", where, 0xffffffffu));
    spec.port = static_cast<std::uint16_t>(get_unsigned(l, "port", where, 65535));
    try {
      spec.protocol = l.contains("protocol")
                          ? parse_protocol(get<std::string>(l, "protocol", where))
                          : Protocol::Tcp;
      if (l.contains("address")) {
        spec.address = IpAddress::parse(get<std::string>(l, "address", where));
      }
    } catch (const json_io::JsonError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      throw ScenarioError(where + ": " + e.what());
    }
    host.listeners.push_back(spec);
  }
  if (h.contains("ident2")) {
    const auto& i2 = h.at("ident2");
    const std::string where = path + ".ident2";
    require_keys(i2, {"online", "resolver_cost_us", "stalled_pids"}, where);
    if (i2.contains("online")) {
      host.ident2.online = get<bool>(i2, "online", where);
    }
    if (i2.contains("resolver_cost_us")) {
      host.ident2.resolver_cost_us = static_cast<std::uint32_t>(
          get_unsigned(i2, "resolver_cost_us", where, 60'000'000));
    }
    const auto& stalled = array_at(i2, "stalled_pids", where, false);
    for (std::size_t k = 0; k < stalled.size(); ++k) {
      nlohmann::json wrapper = {{"v", stalled[k]}};
      host.ident2.stalled_pids.insert(static_cast<Pid>(
          get_unsigned(wrapper, "v", where + ".stalled_pids" + at_index("", k),
                       0xffffffffu)));
    }
  }
  return host;
}


AttemptSpec parse_attempt(const nlohmann::json& a, const std::string& path)
{
  require_keys(a, {"name", "from", "to", "payload_bytes", "expect",
                   "closes_before_query"},
               path);
  AttemptSpec attempt;
  attempt.name = a.contains("name") ? get<std::string>(a, "name", path) : path;

  const std::string from_path = path + ".from";
  if (!a.contains("from")) {
    throw ScenarioError(from_path + ": missing");
  }
  const auto& from = a.at("from");
  require_keys(from, {"host", "pid", "source_port"}, from_path);
  attempt.from_host = get<std::string>(from, "host", from_path);
  attempt.from_pid = static_cast<Pid>(get_unsigned(from, "pid", from_path, 0xffffffffu));
  if (from.contains("source_port")) {
    attempt.source_port = static_cast<std::uint16_t>(
        get_unsigned(from, "source_port", from_path, 65535));
  }

  const std::string to_path = path + ".to";
  if (!a.contains("to")) {
    throw ScenarioError(to_path + ": missing");
  }
  const auto& to = a.at("to");
  require_keys(to, {"host", "port", "protocol", "loopback"}, to_path);
  attempt.to_host = get<std::string>(to, "host", to_path);
  attempt.to_port = static_cast<std::uint16_t>(get_unsigned(to, "port", to_path, 65535));
  if (to.contains("protocol")) {
    try {
      attempt.protocol = parse_protocol(get<std::string>(to, "protocol", to_path));
    } catch (const json_io::JsonError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      throw ScenarioError(to_path + ".protocol: " + e.what());
    }
  }
  if (to.contains("loopback")) {
    attempt.loopback = get<bool>(to, "loopback", to_path);
  }

  if (a.contains("payload_bytes")) {
    attempt.payload_bytes = get_unsigned(a, "payload_bytes", path, 1ull << 40);
  }
  if (a.contains("closes_before_query")) {
    attempt.closes_before_query = get<bool>(a, "closes_before_query", path);
  }
  if (a.contains("expect")) {
    attempt.expect = parse_expect(get<std::string>(a, "expect", path), path + ".expect");
  }
  return attempt;
}

} // namespace


Scenario Scenario::from_json(const nlohmann::json& document)
{
  Scenario s;
  try {
    require_keys(document, {"name", "clock", "client", "hosts", "policy", "attempts"},
                 "scenario");
    if (document.contains("name")) {
      s.name = get<std::string>(document, "name", "scenario");
    }
    if (document.contains("clock")) {
      const auto& clock = document.at("clock");
      require_keys(clock, {"seed", "network_latency_us"}, "clock");
      if (clock.contains("seed")) {
        s.seed = get_unsigned(clock, "seed", "clock", ~0ull);
      }
      if (clock.contains("network_latency_us")) {
        s.network_latency = std::chrono::microseconds(
            get_unsigned(clock, "network_latency_us", "clock", 10'000'000));
      }
    }
    if (document.contains("client")) {
      const auto& client = document.at("client");
      require_keys(client, {"syn_retries", "initial_rto_ms"}, "client");
      if (client.contains("syn_retries")) {
        s.client.syn_retries =
            static_cast<std::uint32_t>(get_unsigned(client, "syn_retries", "client", 16));
      }
      if (client.contains("initial_rto_ms")) {
        s.client.initial_rto_ms = static_cast<std::uint32_t>(
            get_unsigned(client, "initial_rto_ms", "client", 600'000));
      }
    }
    if (document.contains("policy")) {
      const auto& policy = document.at("policy");
      require_keys(policy, {"exempt_uids", "exempt_usernames", "privileged_port_bound",
                            "verdict_timeout_ms", "queue_capacity", "peer"},
                   "policy");
      json_io::read_policy_fields(policy, "policy", s.policy);
      if (policy.contains("queue_capacity")) {
        s.queue_capacity = get_unsigned(policy, "queue_capacity", "policy", 1u << 20);
      }
      if (policy.contains("peer")) {
        json_io::read_peer(policy.at("peer"), "policy.peer", s.peer);
      }
    }
    const auto& hosts = array_at(document, "hosts", "scenario");
    for (std::size_t i = 0; i < hosts.size(); ++i) {
      s.hosts.push_back(parse_host(hosts[i], at_index("hosts", i)));
    }
    const auto& attempts = array_at(document, "attempts", "scenario");
    for (std::size_t i = 0; i < attempts.size(); ++i) {
      s.attempts.push_back(parse_attempt(attempts[i], at_index("attempts", i)));
    }
  } catch (const json_io::JsonError& e) {
    throw ScenarioError(e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ScenarioError(std::string("scenario: ") + e.what());
  }
  s.validate();
  return s;
}


Scenario Scenario::load(const std::string& path)
{
  std::ifstream in(path);
  if (!in) {
    throw ScenarioError("cannot read scenario file '" + path + "'");
  }
  nlohmann::json document;
  try {
    document = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ScenarioError(path + ": " + e.what());
  }
  return from_json(document);
}


void Scenario::validate() const
{
  try {
    policy.validate();
    peer.validate();
  } catch (const std::invalid_argument& e) {
    throw ScenarioError(e.what());
  }
  if (queue_capacity == 0) {
    throw ScenarioError("policy.queue_capacity: must be > 0");
  }

  std::map<IpAddress, std::string> owner;
  std::set<std::string> names;
  for (std::size_t h = 0; h < hosts.size(); ++h) {
    const HostSpec& host = hosts[h];
    const std::string path = at_index("hosts", h);
    if (!names.insert(host.name).second) {
      throw ScenarioError(path + ".name: duplicate host name '" + host.name + "'");
    }
    for (const IpAddress& a : host.addresses) {
      if (a.is_loopback() || a.is_unspecified()) {
        throw ScenarioError(path + ".addresses: " + a.to_string() +
                            " cannot be a host address");
      }
      auto [it, inserted] = owner.emplace(a, host.name);
      if (!inserted) {
        throw ScenarioError(path + ".addresses: " + a.to_string() +
                            " is already used by host '" + it->second + "'");
      }
    }
    std::set<Pid> pids;
    for (std::size_t p = 0; p < host.processes.size(); ++p) {
      if (!pids.insert(host.processes[p].pid).second) {
        throw ScenarioError(at_index(path + ".processes", p) + ".pid: duplicate pid " +
                            std::to_string(host.processes[p].pid));
      }
    }
    std::set<std::tuple<Protocol, IpAddress, std::uint16_t>> bound;
    for (std::size_t l = 0; l < host.listeners.size(); ++l) {
      const ListenerSpec& listener = host.listeners[l];
      const std::string where = at_index(path + ".listeners", l);
      if (!pids.contains(listener.pid)) {
        throw ScenarioError(where + ".pid: " + std::to_string(listener.pid) +
                            " is not a declared process of host '" + host.name + "'");
      }
      const IpAddress address = listener.address.value_or(IpAddress::any_v6());
      if (!bound.emplace(listener.protocol, address, listener.port).second) {
        throw ScenarioError(where + ": port " + std::to_string(listener.port) +
                            " is already bound");
      }
    }
  }

  for (std::size_t i = 0; i < attempts.size(); ++i) {
    const AttemptSpec& a = attempts[i];
    const std::string path = at_index("attempts", i);
    auto from = std::find_if(hosts.begin(), hosts.end(),
                             [&](const HostSpec& h) { return h.name == a.from_host; });
    if (from == hosts.end()) {
      throw ScenarioError(path + ".from.host: unknown host '" + a.from_host + "'");
    }
    if (std::none_of(from->processes.begin(), from->processes.end(),
                     [&](const ProcessRecord& p) { return p.pid == a.from_pid; })) {
      throw ScenarioError(path + ".from.pid: " + std::to_string(a.from_pid) +
                          " is not a declared process of host '" + a.from_host + "'");
    }
    if (std::none_of(hosts.begin(), hosts.end(),
                     [&](const HostSpec& h) { return h.name == a.to_host; })) {
      throw ScenarioError(path + ".to.host: unknown host '" + a.to_host + "'");
    }
    if (a.loopback && a.from_host != a.to_host) {
      throw ScenarioError(path + ".to.loopback: only possible when from.host == to.host");
    }
  }
}


// ---------------------------------------------------------------------------
// Reports

bool ScenarioReport::all_passed() const
{
  return std::all_of(results.begin(), results.end(),
                     [](const AttemptResult& r) { return r.passed(); });
}


std::vector<std::string> ScenarioReport::failures() const
{
  std::vector<std::string> out;
  for (const auto& r : results) {
    if (!r.passed()) {
      out.push_back(r.name + ": expected " + std::string(to_string(*r.expect)) +
                    ", got " + std::string(to_string(r.outcome)));
    }
  }
  return out;
}


nlohmann::ordered_json ScenarioReport::to_json() const
{
  nlohmann::ordered_json out;
  out["scenario"] = name;
  out["seed"] = seed;
  nlohmann::ordered_json attempts = nlohmann::ordered_json::array();
  std::size_t with_expectation = 0;
  std::size_t passed = 0;
  for (const auto& r : results) {
    nlohmann::ordered_json a;
    a["name"] = r.name;
    a["protocol"] = to_string(r.protocol);
    a["from"] = {{"host", r.from_host}, {"pid", r.from_pid},
                 {"endpoint", r.from.to_string()}};
    a["to"] = {{"host", r.to_host}, {"endpoint", r.to.to_string()}};
    a["verdict"] = to_string(r.outcome);
    a["action"] = to_string(r.action);
    a["reason"] = r.reason ? nlohmann::ordered_json(to_string(*r.reason))
                           : nlohmann::ordered_json(nullptr);
    a["latency_us"] = std::chrono::duration<double, std::micro>(r.latency).count();
    a["icmp"] = r.icmp;
    a["retries"] = r.retries;
    a["adjudications"] = r.adjudications;
    a["bypassed"] = r.bypassed;
    a["connector"] = r.connector ? json_io::identity_to_json(*r.connector)
                                 : nlohmann::ordered_json(nullptr);
    a["listener"] = r.listener ? json_io::identity_to_json(*r.listener)
                               : nlohmann::ordered_json(nullptr);
    if (r.expect) {
      ++with_expectation;
      passed += r.passed() ? 1 : 0;
      a["expect"] = to_string(*r.expect);
      a["pass"] = r.passed();
    } else {
      a["expect"] = nullptr;
      a["pass"] = nullptr;
    }
    attempts.push_back(std::move(a));
  }
  out["results"] = std::move(attempts);
  out["summary"] = {{"attempts", results.size()},
                    {"with_expectation", with_expectation},
                    {"passed", passed},
                    {"failed", with_expectation - passed}};
  out["hosts"] = hosts;
  return out;
}


// ---------------------------------------------------------------------------
// Running

namespace {

// Swallows every message, as if the daemon were not running.
class UnansweredClient final : public Ident2Client
{
public:
  void send(const wire::Message&, ReplyHandler) override {}
};


struct Host
{
  const HostSpec* spec = nullptr;
  std::shared_ptr<SimHostTable> table = std::make_shared<SimHostTable>();
  std::unique_ptr<Ident2Daemon> ident2;
  std::unique_ptr<Ident2Client> client;
  SimPacketQueue queue;
  std::unique_ptr<Netid> netid;
  std::optional<VerdictRecord> last_record;
  std::uint16_t next_ephemeral = 40000;

  std::uint16_t ephemeral()
  {
    const std::uint16_t port = next_ephemeral++;
    if (next_ephemeral == 0) {
      next_ephemeral = 40000;
    }
    return port;
  }
};


nlohmann::ordered_json ident2_stats_json(const Ident2Stats& s)
{
  nlohmann::ordered_json out;
  out["local_queries"] = s.local_queries;
  out["peer_queries"] = s.peer_queries;
  out["refused"] = s.refused;
  out["malformed"] = s.malformed;
  out["relays"] = s.relays;
  out["relay_retransmits"] = s.relay_retransmits;
  out["relay_exhausted"] = s.relay_exhausted;
  out["unmatched_replies"] = s.unmatched_replies;
  out["backend_calls"] = s.backend_calls;
  out["backend_errors"] = s.backend_errors;
  out["cache_hits"] = s.cache_hits;
  out["notifies"] = s.notifies;
  out["notify_closes"] = s.notify_closes;
  return out;
}


constexpr std::uint64_t kSegmentBytes = 1460;

} // namespace


ScenarioReport run_scenario(const Scenario& scenario)
{
  scenario.validate();

  VirtualExecutor executor;
  SimNetwork network(executor, scenario.network_latency);

  std::vector<std::unique_ptr<Host>> hosts;
  std::map<std::string, Host*> by_name;
  for (std::size_t index = 0; index < scenario.hosts.size(); ++index) {
    const HostSpec& spec = scenario.hosts[index];
    auto host = std::make_unique<Host>();
    host->spec = &spec;
    for (const auto& p : spec.processes) {
      host->table->add_process(p);
    }
    for (const auto& l : spec.listeners) {
      host->table->open_socket(l.pid, l.protocol,
                               l.address.value_or(IpAddress::any_v6()), l.port);
    }

    Ident2Config config;
    config.peer = scenario.peer;
    config.privileged_port_bound = scenario.policy.privileged_port_bound;
    config.local_addresses = spec.addresses;
    config.resolver_cost = std::chrono::microseconds(spec.ident2.resolver_cost_us);
    config.seed = scenario.seed * 1000003u + index;

    Host* raw = host.get();
    const Endpoint peer_endpoint{spec.addresses.front(), scenario.peer.peer_port};
    std::shared_ptr<DatagramSocket> socket;
    if (spec.ident2.online) {
      socket = network.bind(peer_endpoint, [raw, &network, peer_endpoint](
                                               std::span<const std::uint8_t> bytes,
                                               const Endpoint& source) {
        raw->ident2->handle_peer_datagram(
            bytes, source, [&network, peer_endpoint, source](std::vector<std::uint8_t> out) {
              network.bind(peer_endpoint, nullptr)->send_to(source, out);
            });
      });
    } else {
      socket = network.bind(peer_endpoint, nullptr);
    }
    host->ident2 = std::make_unique<Ident2Daemon>(executor, config, host->table, socket);
    if (!spec.ident2.stalled_pids.empty()) {
      host->ident2->set_stall(
          [stalled = spec.ident2.stalled_pids](const ConnTuple&,
                                               const std::optional<Identity>& id) {
            return id && stalled.contains(id->pid);
          });
    }
    if (spec.ident2.online) {
      host->client = std::make_unique<InProcessIdent2Client>(executor, *host->ident2);
    } else {
      host->client = std::make_unique<UnansweredClient>();
    }

    NetidConfig netid_config;
    netid_config.policy = scenario.policy;
    netid_config.queue_capacity = scenario.queue_capacity;
    netid_config.seed = scenario.seed * 7919u + index;
    host->netid = std::make_unique<Netid>(executor, netid_config, *host->client,
                                          host->queue);
    host->netid->set_observer(
        [raw](const VerdictRecord& record) { raw->last_record = record; });

    by_name[spec.name] = raw;
    hosts.push_back(std::move(host));
  }

  ScenarioReport report;
  report.name = scenario.name;
  report.seed = scenario.seed;
  PacketRef next_ref = 1;

  for (const AttemptSpec& attempt : scenario.attempts) {
    Host& from = *by_name.at(attempt.from_host);
    Host& to = *by_name.at(attempt.to_host);
    const Duration hop = (&from == &to) ? Duration::zero() : scenario.network_latency;

    const IpAddress src = attempt.loopback ? IpAddress::loopback_v4()
                                           : from.spec->addresses.front();
    const IpAddress dst = attempt.loopback ? IpAddress::loopback_v4()
                                           : to.spec->addresses.front();
    const std::uint16_t sport = attempt.source_port.value_or(from.ephemeral());
    const ConnTuple flow{attempt.protocol, src, sport, dst, attempt.to_port};

    AttemptResult result;
    result.name = attempt.name;
    result.protocol = attempt.protocol;
    result.from_host = attempt.from_host;
    result.from = flow.endpoint();
    result.from_pid = attempt.from_pid;
    result.to_host = attempt.to_host;
    result.to = flow.far();
    result.expect = attempt.expect;

    const SocketId connector_socket = from.table->open_socket(
        attempt.from_pid, attempt.protocol, src, sport, dst, attempt.to_port);
    const auto adjudications_before = to.netid->metrics().adjudications;
    const auto bypassed_before = to.netid->metrics().bypassed;
    bool connector_open = true;
    const auto icmp_before = to.queue.unreachable().size();
    to.last_record.reset();

    auto send_packet = [&](bool initial, bool closes) {
      const PacketRef ref = next_ref++;
      executor.schedule_after(hop, [&to, flow, initial, closes, ref, &executor] {
        to.netid->on_packet(PacketEvent{flow, initial, closes, executor.now(), ref});
      });
      return ref;
    };
    auto await_verdict = [&](PacketRef ref) {
      executor.run_until([&] { return to.queue.verdict(ref).has_value(); });
      return to.queue.verdict(ref).value_or(VerdictAction::DropSilent);
    };

    const Timestamp first_sent = executor.now();
    Timestamp sent = first_sent;
    std::optional<Duration> first_latency;
    VerdictAction action = VerdictAction::DropSilent;
    for (std::uint32_t attempt_no = 0;; ++attempt_no) {
      const PacketRef ref = send_packet(true, false);
      if (attempt.closes_before_query && connector_open) {
        from.table->close_socket(connector_socket);
        connector_open = false;
      }
      action = await_verdict(ref);
      if (!first_latency) {
        first_latency = executor.now() - sent;
      }
      const bool may_retry = attempt.protocol == Protocol::Tcp &&
                             action == VerdictAction::DropSilent &&
                             attempt_no < scenario.client.syn_retries;
      if (!may_retry) {
        break;
      }
      // Exponential SYN backoff from the previous transmission.
      const Duration rto = std::chrono::milliseconds(
          std::uint64_t(scenario.client.initial_rto_ms) << attempt_no);
      executor.run_until(sent + rto);
      sent = executor.now();
      ++result.retries;
    }

    result.action = action;
    result.latency = *first_latency;
    if (to.last_record) {
      result.reason = to.last_record->reason;
      result.connector = to.last_record->connector;
      result.listener = to.last_record->listener;
    }
    executor.run_for(hop);
    result.icmp = to.queue.unreachable().size() > icmp_before;
    switch (action) {
      case VerdictAction::Accept: result.outcome = Expect::Allow; break;
      case VerdictAction::DropNotify:
        result.outcome = result.icmp ? Expect::DenyNotify : Expect::DenySilent;
        break;
      case VerdictAction::DropSilent: result.outcome = Expect::DenySilent; break;
    }

    if (action == VerdictAction::Accept) {
      std::optional<SocketId> accepted;
      if (attempt.protocol == Protocol::Tcp) {
        const auto listener = to.table->find_socket(flow.swapped());
        if (listener) {
          const auto owners = to.table->socket_owners(listener->socket_id);
          if (!owners.empty()) {
            accepted = to.table->open_socket(owners.front(), Protocol::Tcp, dst,
                                             attempt.to_port, src, sport);
          }
        }
      }
      const std::uint64_t segments =
          (attempt.payload_bytes + kSegmentBytes - 1) / kSegmentBytes;
      for (std::uint64_t i = 0; i < segments; ++i) {
        await_verdict(send_packet(false, false));
      }
      if (attempt.protocol == Protocol::Tcp) {
        await_verdict(send_packet(false, true));
      }
      if (accepted) {
        to.table->close_socket(*accepted);
      }
    }

    if (connector_open) {
      from.table->close_socket(connector_socket);
    }
    executor.run_until_idle();
    to.netid->conntrack_gc(executor.now());

    result.adjudications = to.netid->metrics().adjudications - adjudications_before;
    result.bypassed = to.netid->metrics().bypassed - bypassed_before;
    report.results.push_back(std::move(result));
  }

  for (const auto& host : hosts) {
    nlohmann::ordered_json h;
    h["name"] = host->spec->name;
    h["netid"] = host->netid->metrics().to_json();
    h["ident2"] = ident2_stats_json(host->ident2->stats());
    report.hosts.push_back(std::move(h));
  }
  return report;
}

} // namespace uservisor::sim
