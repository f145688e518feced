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

#ifndef USERVISOR_TESTS_FIXTURES_HPP
#define USERVISOR_TESTS_FIXTURES_HPP

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "uservisor/ident2.hpp"
#include "uservisor/introspection.hpp"
#include "uservisor/netid.hpp"
#include "uservisor/simnet.hpp"

// Hosts on one virtual clock with real ident2 daemons and a simulated
// network between their peer ports.

namespace uservisor::testing {

using namespace std::chrono_literals;

struct Node
{
  IpAddress address;
  std::shared_ptr<SimHostTable> table = std::make_shared<SimHostTable>();
  std::unique_ptr<Ident2Daemon> daemon;
  Endpoint peer_endpoint;
  bool online = true;
};


class Cluster
{
public:
  explicit Cluster(Duration latency = 50us) : network(executor, latency) {}

  Node& add(const std::string& address, Ident2Config config = {}, bool online = true)
  {
    auto node = std::make_unique<Node>();
    node->address = IpAddress::parse(address);
    node->online = online;
    node->peer_endpoint = Endpoint{node->address, config.peer.peer_port};
    config.local_addresses.push_back(node->address);
    Node* raw = node.get();
    auto socket = network.bind(
        node->peer_endpoint,
        online ? sim::SimNetwork::Receiver(
                     [this, raw](std::span<const std::uint8_t> bytes, const Endpoint& from) {
                       raw->daemon->handle_peer_datagram(
                           bytes, from, [this, raw, from](std::vector<std::uint8_t> out) {
                             network.bind(raw->peer_endpoint, nullptr)->send_to(from, out);
                           });
                     })
               : sim::SimNetwork::Receiver());
    node->daemon = std::make_unique<Ident2Daemon>(executor, config, node->table, socket);
    nodes.push_back(std::move(node));
    return *raw;
  }

  // Sends a local query and runs the clock until it is answered.
  std::optional<wire::Reply> query(Node& node, const wire::Query& q)
  {
    std::optional<wire::Reply> reply;
    node.daemon->handle_local_query(q, [&](const wire::Reply& r) { reply = r; });
    executor.run_until([&] { return reply.has_value(); });
    return reply;
  }

  // Sends `datagram` to `to` from `from` and collects whatever comes back.
  std::vector<wire::Message> probe(const Endpoint& from, const Endpoint& to,
                                   const std::vector<std::uint8_t>& datagram)
  {
    std::vector<wire::Message> replies;
    auto socket = network.bind(from, [&](std::span<const std::uint8_t> bytes, const Endpoint&) {
      replies.push_back(wire::decode(bytes));
    });
    socket->send_to(to, datagram);
    executor.run_until_idle();
    network.unbind(from);
    return replies;
  }

  VirtualExecutor executor;
  sim::SimNetwork network;
  std::vector<std::unique_ptr<Node>> nodes;
};


inline ProcessRecord make_process(Pid pid, Uid uid, const std::string& name, Gid gid,
                                  std::set<Gid> sup = {})
{
  return ProcessRecord{pid, uid, name, gid, std::move(sup), {}};
}

} // namespace uservisor::testing

#endif // USERVISOR_TESTS_FIXTURES_HPP
