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

#include "uservisor/introspection.hpp"

using namespace uservisor;

namespace {

const IpAddress kHost = IpAddress::parse("10.0.0.2");
const IpAddress kPeer = IpAddress::parse("10.0.0.1");

ProcessRecord process(Pid pid, Uid uid, std::string name, Gid gid, std::set<Gid> sup = {})
{
  return ProcessRecord{pid, uid, std::move(name), gid, std::move(sup), {}};
}

ConnTuple syn_target(std::uint16_t port)
{
  return ConnTuple{Protocol::Tcp, kHost, port, kPeer, 40000};
}

} // namespace


TEST_SUITE("introspection")
{
  TEST_CASE("exact match wins over the listener")
  {
    SimHostTable table;
    table.add_process(process(4242, 1001, "alice", 1001, {2000}));
    table.add_process(process(4243, 1002, "bob", 1002));
    const SocketId listener = table.open_socket(4242, Protocol::Tcp, IpAddress(), 5000);
    const SocketId established =
        table.open_socket(4243, Protocol::Tcp, kHost, 5000, kPeer, 40000);

    const auto exact = table.find_socket(syn_target(5000));
    REQUIRE(exact);
    CHECK(exact->socket_id == established);
    CHECK(table.resolve(syn_target(5000))->uid == 1002);

    table.close_socket(established);
    const auto fallback = table.find_socket(syn_target(5000));
    REQUIRE(fallback);
    CHECK(fallback->socket_id == listener);
    CHECK(fallback->wildcard_remote());
    CHECK(table.resolve(syn_target(5000))->username == "alice");

    CHECK_FALSE(table.find_socket(syn_target(5001)));
    CHECK_FALSE(table.resolve(syn_target(5001)));
  }

  TEST_CASE("wildcard address families")
  {
    SimHostTable table;
    table.add_process(process(10, 1, "a", 1));
    table.open_socket(10, Protocol::Tcp, IpAddress::any_v4(), 6000);
    table.open_socket(10, Protocol::Tcp, IpAddress::parse("10.0.0.9"), 6001);
    CHECK(table.find_socket(syn_target(6000)));
    // Bound to a different specific address.
    CHECK_FALSE(table.find_socket(syn_target(6001)));
    const ConnTuple v6{Protocol::Tcp, IpAddress::parse("fe80::2"), 6000,
                       IpAddress::parse("fe80::1"), 40000};
    CHECK_FALSE(table.find_socket(v6));
  }

  TEST_CASE("shared sockets and the lowest-pid rule")
  {
    SimHostTable table;
    table.add_process(process(50, 1001, "alice", 1001));
    table.add_process(process(40, 1001, "alice", 1001));
    const SocketId s = table.open_socket(50, Protocol::Tcp, IpAddress(), 5000);
    table.share_socket(s, 40);
    CHECK(table.socket_owners(s) == std::vector<Pid>{40, 50});
    CHECK(table.resolve(syn_target(5000))->pid == 40);
    CHECK(table.resolve(syn_target(5000))->uid == table.find_socket(syn_target(5000))->owner_uid);
  }

  TEST_CASE("exited holders leave an orphaned socket")
  {
    SimHostTable table;
    table.add_process(process(4242, 1001, "alice", 1001));
    const SocketId s = table.open_socket(4242, Protocol::Udp, IpAddress(), 5353);
    table.exit_process(4242);
    CHECK(table.socket_owners(s).empty());
    CHECK_FALSE(table.process_identity(4242));
    const ConnTuple t{Protocol::Udp, kHost, 5353, kPeer, 40000};
    CHECK(table.find_socket(t));
    CHECK_FALSE(table.resolve(t));

    // A new process reusing the pid does not inherit the socket.
    table.add_process(process(4242, 1002, "bob", 1002));
    CHECK(table.socket_owners(s).empty());
  }

  TEST_CASE("newgrp is visible in the identity")
  {
    SimHostTable table;
    table.add_process(process(4242, 1001, "alice", 1001, {2000}));
    CHECK(table.process_identity(4242)->primary_gid == 1001);
    table.set_primary_gid(4242, 2000);
    const auto id = table.process_identity(4242);
    CHECK(id->primary_gid == 2000);
    CHECK(id->supplemental_gids == std::set<Gid>{2000});
    CHECK(*id == Identity{1001, "alice", 2000, {2000}, 4242});
  }

  TEST_CASE("duplicate and unknown inputs are rejected")
  {
    SimHostTable table;
    table.add_process(process(1, 1, "a", 1));
    CHECK_THROWS_AS(table.add_process(process(1, 2, "b", 2)), std::invalid_argument);
    table.open_socket(1, Protocol::Tcp, IpAddress(), 80);
    CHECK_THROWS_AS(table.open_socket(1, Protocol::Tcp, IpAddress(), 80),
                    std::invalid_argument);
    CHECK_NOTHROW(table.open_socket(1, Protocol::Udp, IpAddress(), 80));
    CHECK_THROWS_AS(table.open_socket(99, Protocol::Tcp, IpAddress(), 81),
                    std::invalid_argument);
  }

  TEST_CASE("unavailable backend is an error, not a miss")
  {
    SimHostTable table;
    table.add_process(process(1, 1, "a", 1));
    table.open_socket(1, Protocol::Tcp, IpAddress(), 80);
    table.set_available(false);
    CHECK_THROWS_AS(table.find_socket(syn_target(80)), BackendError);
    CHECK_THROWS_AS(table.resolve(syn_target(80)), BackendError);
    table.set_available(true);
    CHECK(table.resolve(syn_target(80)));
  }

  TEST_CASE("host table file")
  {
    SimHostTable table;
    SimHostTable::load_json(table, nlohmann::json::parse(R"({
      "processes": [
        {"pid": 100, "uid": 1001, "username": "alice", "primary_gid": 1001},
        {"pid": 101, "uid": 1001, "username": "alice", "primary_gid": 1001,
         "supplemental_gids": [2000]}
      ],
      "sockets": [
        {"pid": 101, "protocol": "tcp", "local": "0.0.0.0:5000", "shared_with": [100]},
        {"pid": 100, "protocol": "udp", "local": "10.0.0.2:53", "remote": "10.0.0.1:999"}
      ]
    })"));
    CHECK(table.process_count() == 2);
    CHECK(table.socket_count() == 2);
    CHECK(table.resolve(syn_target(5000))->pid == 100);
    CHECK_THROWS_AS(SimHostTable::load_json(table, nlohmann::json::parse(R"({"processes": 1})")),
                    std::invalid_argument);
  }

  TEST_CASE("kernel table parsing")
  {
    const std::string udp =
        "  sl  local_address rem_address   st tx_queue rx_queue tr tm->when retrnsmt   uid  "
        "timeout inode ref pointer drops\n"
        "  12: 0100007F:0035 00000000:0000 07 00000000:00000000 00:00000000 00000000   101 "
        "       0 12345 2 0000000000000000 0\n"
        "  13: 0200000A:1388 0100000A:9C40 01 00000000:00000000 00:00000000 00000000  1001 "
        "       0 777 2 0000000000000000 0\n"
        "  14: 0200000A:1389 00000000:0000 07 00000000:00000000 00:00000000 00000000  1001 "
        "       0 0 2 0000000000000000 0\n";
    const auto records = KernelIntrospection::parse_proc_net_table(udp, Protocol::Udp);
    REQUIRE(records.size() == 3);
    CHECK(records[2].socket_id == 0);
    CHECK(records[0].local_addr == IpAddress::parse("127.0.0.1"));
    CHECK(records[0].local_port == 53);
    CHECK(records[0].owner_uid == 101);
    CHECK(records[0].socket_id == 12345);
    CHECK(records[0].wildcard_remote());
    CHECK(records[1].remote_addr == IpAddress::parse("10.0.0.1"));
    CHECK(records[1].remote_port == 40000);

    const std::string udp6 =
        "  sl  local_address                         remote_address                        st "
        "tx_queue rx_queue tr tm->when retrnsmt   uid  timeout inode ref pointer drops\n"
        "   0: 00000000000000000000000001000000:0035 00000000000000000000000000000000:0000 07 "
        "00000000:00000000 00:00000000 00000000     0        0 4242 2 0000000000000000 0\n";
    const auto v6 = KernelIntrospection::parse_proc_net_table(udp6, Protocol::Udp);
    REQUIRE(v6.size() == 1);
    CHECK(v6[0].local_addr == IpAddress::parse("::1"));

    const auto id = KernelIntrospection::parse_proc_status(
        "Name:\tbash\nPid:\t77\nUid:\t1000\t1001\t1001\t1001\nGid:\t100\t200\t200\t200\n"
        "Groups:\t4 24 27 \n");
    REQUIRE(id);
    CHECK(id->pid == 77);
    CHECK(id->uid == 1001);
    CHECK(id->primary_gid == 200);
    CHECK(id->supplemental_gids == std::set<Gid>{4, 24, 27});
    CHECK_FALSE(KernelIntrospection::parse_proc_status("garbage"));
  }

  TEST_CASE("kernel backend reads process identities" * doctest::skip(!KernelIntrospection::supported()))
  {
    // Only checks the plumbing works where /proc is available.
    KernelIntrospection kernel;
    CHECK_NOTHROW(kernel.process_identity(1));
  }
}
