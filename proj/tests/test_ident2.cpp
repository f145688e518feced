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

#include <stdexcept>

#include <doctest.h>

#include "fixtures.hpp"
#include "uservisor/ident2.hpp"

using namespace uservisor;
using namespace uservisor::testing;
using wire::ReplyStatus;

namespace {

const IpAddress kA = IpAddress::parse("10.0.0.1");
const IpAddress kB = IpAddress::parse("10.0.0.2");

// node a (10.0.0.1) runs bob's client on 40000; node b (10.0.0.2) runs
// alice's listener on 5000.
struct TwoHosts
{
  explicit TwoHosts(Ident2Config config = {}, bool b_online = true)
    : a(cluster.add("10.0.0.1", config)), b(cluster.add("10.0.0.2", config, b_online))
  {
    a.table->add_process(make_process(300, 1002, "bob", 1002, {2000}));
    a.table->open_socket(300, Protocol::Tcp, kA, 40000, kB, 5000);
    b.table->add_process(make_process(4242, 1001, "alice", 1001, {2000}));
    b.table->open_socket(4242, Protocol::Tcp, IpAddress(), 5000);
  }

  Cluster cluster;
  Node& a;
  Node& b;
  // Oriented connector -> listener.
  ConnTuple flow{Protocol::Tcp, kA, 40000, kB, 5000};
};

} // namespace


TEST_SUITE("ident2")
{
  TEST_CASE("local listener resolves")
  {
    TwoHosts h;
    const auto reply =
        h.cluster.query(h.b, wire::Query{5, h.flow.swapped(), wire::Target::LocalEnd});
    REQUIRE(reply);
    CHECK(reply->request_id == 5);
    CHECK(reply->status == ReplyStatus::Ok);
    CHECK(*reply->identity == Identity{1001, "alice", 1001, {2000}, 4242});
    CHECK(h.b.daemon->stats().relays == 0);
  }

  TEST_CASE("never-bound port is not found")
  {
    TwoHosts h;
    ConnTuple t = h.flow.swapped();
    t.endpoint_port = 5999;
    const auto reply = h.cluster.query(h.b, wire::Query{6, t, wire::Target::LocalEnd});
    CHECK(reply->status == ReplyStatus::NotFound);
    CHECK_FALSE(reply->identity);
  }

  TEST_CASE("remote end is relayed and equals the peer's own answer")
  {
    TwoHosts h;
    const auto relayed =
        h.cluster.query(h.b, wire::Query{7, h.flow.swapped(), wire::Target::RemoteEnd});
    const auto direct = h.cluster.query(h.a, wire::Query{8, h.flow, wire::Target::LocalEnd});
    REQUIRE(relayed);
    REQUIRE(direct);
    CHECK(relayed->status == direct->status);
    CHECK(relayed->identity == direct->identity);
    CHECK(relayed->identity->username == "bob");
    CHECK(relayed->request_id == 7);
    CHECK(h.b.daemon->stats().relays == 1);
    CHECK(h.a.daemon->stats().peer_queries == 1);
    CHECK(h.b.daemon->outstanding_relays() == 0);
    // Two one-way hops of 50 us.
    CHECK(h.cluster.executor.now() == 100us);
  }

  TEST_CASE("a LocalEnd query for a foreign address is relayed too")
  {
    TwoHosts h;
    const auto reply = h.cluster.query(h.b, wire::Query{9, h.flow, wire::Target::LocalEnd});
    CHECK(reply->identity->username == "bob");
  }

  TEST_CASE("relay exhaustion is NotFound after retries x interval")
  {
    TwoHosts h({}, false);
    const auto reply = h.cluster.query(h.a, wire::Query{9, h.flow, wire::Target::RemoteEnd});
    REQUIRE(reply);
    CHECK(reply->status == ReplyStatus::NotFound);
    CHECK(h.cluster.executor.now() == 300ms);
    CHECK(h.a.daemon->stats().relay_exhausted == 1);
    CHECK(h.a.daemon->stats().relay_retransmits == 2);
    CHECK(h.a.daemon->outstanding_relays() == 0);
  }

  TEST_CASE("peer hardening")
  {
    Ident2Config config;
    config.peer.allowed_peer_cidrs = {Cidr::parse("10.0.0.0/24")};
    TwoHosts h(config);
    const wire::Query q{11, h.flow.swapped(), wire::Target::LocalEnd};
    const auto frame = wire::encode(q);

    auto status_of = [](const std::vector<wire::Message>& replies) {
      REQUIRE(replies.size() == 1);
      const auto& r = std::get<wire::Reply>(replies[0]);
      CHECK_FALSE(r.identity);
      return r.status;
    };

    SUBCASE("privileged in-range source is answered")
    {
      const auto replies = h.cluster.probe(Endpoint{kA, 313}, h.b.peer_endpoint, frame);
      REQUIRE(replies.size() == 1);
      CHECK(std::get<wire::Reply>(replies[0]).status == ReplyStatus::Ok);
    }
    SUBCASE("unprivileged source port")
    {
      CHECK(status_of(h.cluster.probe(Endpoint{kA, 40000}, h.b.peer_endpoint, frame)) ==
            ReplyStatus::Refused);
      CHECK(status_of(h.cluster.probe(Endpoint{kA, 1024}, h.b.peer_endpoint, frame)) ==
            ReplyStatus::Refused);
    }
    SUBCASE("out-of-range address")
    {
      CHECK(status_of(h.cluster.probe(Endpoint{IpAddress::parse("192.168.1.5"), 313},
                                      h.b.peer_endpoint, frame)) == ReplyStatus::Refused);
    }
    SUBCASE("peers may only ask about the receiver's own end")
    {
      const auto remote = wire::encode(wire::Query{12, q.tuple, wire::Target::RemoteEnd});
      CHECK(status_of(h.cluster.probe(Endpoint{kA, 313}, h.b.peer_endpoint, remote)) ==
            ReplyStatus::Refused);
      const auto foreign = wire::encode(wire::Query{13, h.flow, wire::Target::LocalEnd});
      CHECK(status_of(h.cluster.probe(Endpoint{kA, 313}, h.b.peer_endpoint, foreign)) ==
            ReplyStatus::Refused);
    }
    SUBCASE("notifications and garbage from peers get silence")
    {
      const auto notify = wire::encode(wire::Notify{
          14, Protocol::Tcp, kB, 5000, Identity{0, "root", 0, {}, 1}});
      CHECK(h.cluster.probe(Endpoint{kA, 313}, h.b.peer_endpoint, notify).empty());
      CHECK_FALSE(h.b.daemon->precache().lookup(PrecacheKey{Protocol::Tcp, kB, 5000},
                                                h.cluster.executor.now()));
      CHECK(h.cluster.probe(Endpoint{kA, 313}, h.b.peer_endpoint, {1, 2, 3}).empty());
      CHECK(h.b.daemon->stats().malformed == 1);
    }
  }

  TEST_CASE("replies must match an outstanding relay and its destination")
  {
    TwoHosts h({}, false);
    std::optional<wire::Reply> reply;
    h.a.daemon->handle_local_query(wire::Query{20, h.flow, wire::Target::RemoteEnd},
                                   [&](const wire::Reply& r) { reply = r; });
    h.cluster.executor.run_for(10ms);
    REQUIRE(h.a.daemon->outstanding_relays() == 1);

    // Unknown id from the right peer.
    const auto forged = wire::encode(wire::Reply::ok(12345, Identity{0, "root", 0, {}, 1}));
    auto forger = h.cluster.network.bind(Endpoint{kB, 313}, nullptr);
    forger->send_to(h.a.peer_endpoint, forged);
    // Same id, wrong source address.
    h.cluster.executor.run_for(1ms);
    CHECK(h.a.daemon->stats().unmatched_replies == 1);
    CHECK_FALSE(reply);
    CHECK(h.a.daemon->outstanding_relays() == 1);
    h.cluster.executor.run_until_idle();
    CHECK(reply->status == ReplyStatus::NotFound);
  }

  TEST_CASE("precache hit makes no backend call")
  {
    TwoHosts h;
    const Identity cached{1001, "alice", 1001, {}, 9999};
    h.b.daemon->handle_notify(wire::Notify{1, Protocol::Tcp, kB, 5000, cached});
    const auto reply =
        h.cluster.query(h.b, wire::Query{2, h.flow.swapped(), wire::Target::LocalEnd});
    CHECK(*reply->identity == cached);
    CHECK(h.b.daemon->stats().backend_calls == 0);
    CHECK(h.b.daemon->stats().cache_hits == 1);

    const auto closed = h.b.daemon->handle_notify_close(
        wire::NotifyClose{3, Protocol::Tcp, kB, 5000});
    CHECK(closed.status == ReplyStatus::Ok);
    CHECK(*closed.identity == cached);
    CHECK(h.b.daemon->handle_notify_close(wire::NotifyClose{4, Protocol::Tcp, kB, 5000})
              .status == ReplyStatus::NotFound);
    const auto after =
        h.cluster.query(h.b, wire::Query{5, h.flow.swapped(), wire::Target::LocalEnd});
    CHECK(after->identity->pid == 4242);
    CHECK(h.b.daemon->stats().backend_calls == 1);
  }

  TEST_CASE("wildcard notifications cover every local address")
  {
    TwoHosts h;
    h.b.daemon->handle_notify(
        wire::Notify{1, Protocol::Tcp, IpAddress::any_v6(), 5000, Identity{7, "x", 7, {}, 7}});
    const auto reply =
        h.cluster.query(h.b, wire::Query{2, h.flow.swapped(), wire::Target::LocalEnd});
    CHECK(reply->identity->uid == 7);
  }

  TEST_CASE("precache LRU evicts under capacity 2")
  {
    Ident2Config config;
    config.precache.capacity = 2;
    TwoHosts h(config);
    for (std::uint16_t port : {6001, 6002, 6003}) {
      h.b.daemon->handle_notify(
          wire::Notify{port, Protocol::Tcp, kB, port, Identity{1, "x", 1, {}, port}});
    }
    ConnTuple t{Protocol::Tcp, kB, 6001, kA, 40000};
    h.cluster.query(h.b, wire::Query{1, t, wire::Target::LocalEnd});
    CHECK(h.b.daemon->stats().backend_calls == 1);
    t.endpoint_port = 6003;
    h.cluster.query(h.b, wire::Query{2, t, wire::Target::LocalEnd});
    CHECK(h.b.daemon->stats().backend_calls == 1);
  }

  TEST_CASE("owner exiting during the lookup gives NotFound")
  {
    Ident2Config config;
    config.resolver_cost = 1ms;
    TwoHosts h(config);
    std::optional<wire::Reply> reply;
    h.b.daemon->handle_local_query(wire::Query{1, h.flow.swapped(), wire::Target::LocalEnd},
                                   [&](const wire::Reply& r) { reply = r; });
    h.cluster.executor.run_for(500us);
    h.b.table->exit_process(4242);
    h.cluster.executor.run_until_idle();
    REQUIRE(reply);
    CHECK(reply->status == ReplyStatus::NotFound);
  }

  TEST_CASE("backend failure is Error")
  {
    TwoHosts h;
    h.b.table->set_available(false);
    const auto reply =
        h.cluster.query(h.b, wire::Query{1, h.flow.swapped(), wire::Target::LocalEnd});
    CHECK(reply->status == ReplyStatus::Error);
    CHECK(h.b.daemon->stats().backend_errors == 1);
  }

  TEST_CASE("resolutions are served one at a time")
  {
    Ident2Config config;
    config.resolver_cost = 1ms;
    TwoHosts h(config);
    std::vector<Timestamp> answered;
    for (int i = 0; i < 3; ++i) {
      h.b.daemon->handle_local_query(
          wire::Query{std::uint64_t(i), h.flow.swapped(), wire::Target::LocalEnd},
          [&](const wire::Reply&) { answered.push_back(h.cluster.executor.now()); });
    }
    h.cluster.executor.run_until_idle();
    CHECK(answered == std::vector<Timestamp>{1ms, 2ms, 3ms});
  }

  TEST_CASE("loopback flows never leave the host")
  {
    TwoHosts h;
    const IpAddress lo = IpAddress::loopback_v4();
    h.b.table->add_process(make_process(500, 1003, "carol", 1003));
    h.b.table->open_socket(500, Protocol::Tcp, lo, 41000, lo, 5000);
    const ConnTuple flow{Protocol::Tcp, lo, 41000, lo, 5000};
    const auto listener =
        h.cluster.query(h.b, wire::Query{1, flow.swapped(), wire::Target::LocalEnd});
    const auto connector =
        h.cluster.query(h.b, wire::Query{2, flow.swapped(), wire::Target::RemoteEnd});
    CHECK(listener->identity->username == "alice");
    CHECK(connector->identity->username == "carol");
    CHECK(h.b.daemon->stats().relays == 0);
  }

  TEST_CASE("local frames: notify ack echoes, garbage is dropped")
  {
    TwoHosts h;
    std::vector<std::vector<std::uint8_t>> out;
    auto collect = [&](std::vector<std::uint8_t> bytes) { out.push_back(std::move(bytes)); };
    const Identity id{1001, "alice", 1001, {}, 4242};
    h.b.daemon->handle_local_frame(wire::encode(wire::Notify{77, Protocol::Tcp, kB, 5000, id}),
                                   collect);
    h.b.daemon->handle_local_frame(std::vector<std::uint8_t>{0x49, 0x44}, collect);
    h.b.daemon->handle_local_frame(wire::encode(wire::Reply::ok(1, id)), collect);
    h.cluster.executor.run_until_idle();
    REQUIRE(out.size() == 1);
    CHECK(std::get<wire::Reply>(wire::decode(out[0])) == wire::Reply::ok(77, id));
  }

  TEST_CASE("a pending relay does not hold up local answers")
  {
    TwoHosts h({}, false);
    std::optional<wire::Reply> remote;
    h.a.daemon->handle_local_query(wire::Query{1, h.flow, wire::Target::RemoteEnd},
                                   [&](const wire::Reply& r) { remote = r; });
    const auto local = h.cluster.query(h.a, wire::Query{2, h.flow, wire::Target::LocalEnd});
    CHECK(local->status == ReplyStatus::Ok);
    CHECK(h.cluster.executor.now() < 1ms);
    CHECK_FALSE(remote);
    h.cluster.executor.run_until_idle();
    CHECK(remote);
  }

  TEST_CASE("peer policy")
  {
    PeerPolicy p;
    CHECK_FALSE(p.check_against(500));
    CHECK(p.check_against(300));
    p.retries = 0;
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  }
}
