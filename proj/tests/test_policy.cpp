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

#include <random>
#include <vector>

#include <stdexcept>

#include <doctest.h>

#include "uservisor/policy.hpp"

using namespace uservisor;

namespace {

Identity make(Uid uid, Gid pgid, std::set<Gid> sup = {}, std::string name = "",
              Pid pid = 1)
{
  if (name.empty()) {
    name = "u" + std::to_string(uid);
  }
  return Identity{uid, name, pgid, std::move(sup), pid};
}

// The four allow rules written out as a plain disjunction.
bool oracle_allow(const Identity& c, const Identity& l, std::uint16_t port,
                  const std::set<Uid>& exempt)
{
  const bool same_user = c.uid == l.uid;
  bool group = c.primary_gid == l.primary_gid;
  for (Gid g : c.supplemental_gids) {
    group = group || g == l.primary_gid;
  }
  const bool privileged = port < 1024;
  const bool exempt_user = exempt.count(c.uid) > 0 || exempt.count(l.uid) > 0;
  return same_user || group || privileged || exempt_user;
}

std::vector<std::set<Gid>> subsets(const std::vector<Gid>& universe)
{
  std::vector<std::set<Gid>> out;
  for (unsigned mask = 0; mask < (1u << universe.size()); ++mask) {
    std::set<Gid> s;
    for (std::size_t i = 0; i < universe.size(); ++i) {
      if (mask & (1u << i)) {
        s.insert(universe[i]);
      }
    }
    out.push_back(s);
  }
  return out;
}

} // namespace


TEST_SUITE("policy")
{
  TEST_CASE("privileged port boundary")
  {
    const PolicyConfig cfg;
    CHECK(is_privileged_port(80, cfg));
    CHECK(is_privileged_port(1023, cfg));
    CHECK_FALSE(is_privileged_port(1024, cfg));
    PolicyConfig none;
    none.privileged_port_bound = 0;
    CHECK_FALSE(is_privileged_port(0, none));
    PolicyConfig all;
    all.privileged_port_bound = 65536;
    CHECK(is_privileged_port(65535, all));
  }

  TEST_CASE("exemption by uid or by username")
  {
    PolicyConfig cfg;
    CHECK_FALSE(is_exempt(make(1001, 1001), cfg));
    cfg.exempt_uids = {0};
    CHECK(is_exempt(make(0, 0, {}, "root"), cfg));
    cfg.exempt_usernames = {"slurm"};
    CHECK(is_exempt(make(450, 450, {}, "slurm"), cfg));
    CHECK_FALSE(is_exempt(make(451, 451, {}, "munge"), cfg));
  }

  TEST_CASE("group match uses connector supplementals only")
  {
    CHECK(group_match(make(1, 2000), make(2, 2000)));
    CHECK(group_match(make(1, 1001, {2000}), make(2, 2000)));
    CHECK_FALSE(group_match(make(1, 3000), make(2, 1002, {3000})));
  }

  TEST_CASE("evaluate examples and rule order")
  {
    const PolicyConfig cfg;
    CHECK(evaluate(make(1001, 1001), make(1001, 1001), 5000, cfg) ==
          Decision{true, Reason::UserMatch});
    CHECK(evaluate(make(1001, 1001), make(1002, 1002), 443, cfg) ==
          Decision{true, Reason::PrivilegedPort});
    CHECK(evaluate(make(1001, 1001), make(1002, 1002), 5000, cfg) ==
          Decision{false, Reason::NoRuleMatched});
    CHECK(evaluate(make(1001, 1001, {2000}), make(1002, 2000), 22, cfg).reason ==
          Reason::GroupMatch);

    PolicyConfig exempt;
    exempt.exempt_uids = {1001};
    CHECK(evaluate(make(1001, 1001), make(1002, 1002), 5000, exempt).reason ==
          Reason::ExemptConnector);
    CHECK(evaluate(make(1002, 1002), make(1001, 1001), 5000, exempt).reason ==
          Reason::ExemptListener);
  }

  TEST_CASE("exhaustive sweep against the rule oracle")
  {
    const std::vector<Uid> uids = {1, 2};
    const std::vector<Gid> gids = {10, 20, 30};
    const auto sups = subsets(gids);
    const std::vector<std::uint16_t> ports = {22, 1023, 1024, 5000};
    std::vector<std::set<Uid>> exempt_sets = {{}, {1}, {2}, {1, 2}};

    std::size_t cases = 0;
    std::size_t mismatches = 0;
    for (Uid cu : uids)
      for (Uid lu : uids)
        for (Gid cg : gids)
          for (Gid lg : gids)
            for (const auto& cs : sups)
              for (const auto& ls : sups)
                for (auto port : ports)
                  for (const auto& ex : exempt_sets) {
                    PolicyConfig cfg;
                    cfg.exempt_uids = ex;
                    const Identity c = make(cu, cg, cs);
                    const Identity l = make(lu, lg, ls);
                    const Decision d = evaluate(c, l, port, cfg);
                    ++cases;
                    if (d.allow != oracle_allow(c, l, port, ex)) {
                      ++mismatches;
                    }
                    // allow iff some rule matched
                    CHECK((d.allow == (d.reason != Reason::NoRuleMatched)));
                  }
    CHECK(cases == 2 * 2 * 3 * 3 * 8 * 8 * 4 * 4);
    CHECK(mismatches == 0);
  }

  TEST_CASE("user rule is symmetric")
  {
    const PolicyConfig cfg;
    for (Uid a : {1u, 2u})
      for (Uid b : {1u, 2u}) {
        const bool forward =
            evaluate(make(a, 100 + a), make(b, 200 + b), 5000, cfg).reason ==
            Reason::UserMatch;
        const bool backward =
            evaluate(make(b, 100 + b), make(a, 200 + a), 5000, cfg).reason ==
            Reason::UserMatch;
        CHECK(forward == backward);
      }
  }

  TEST_CASE("adding an exemption never turns allow into deny")
  {
    std::mt19937 rng(7);
    std::uniform_int_distribution<Uid> uid(1, 4);
    std::uniform_int_distribution<Gid> gid(1, 4);
    std::uniform_int_distribution<int> port(0, 3);
    const std::uint16_t ports[] = {22, 1023, 1024, 5000};
    for (int i = 0; i < 2000; ++i) {
      const Identity c = make(uid(rng), gid(rng), {gid(rng)});
      const Identity l = make(uid(rng), gid(rng));
      PolicyConfig before;
      PolicyConfig after;
      after.exempt_uids = {uid(rng)};
      const auto p = ports[port(rng)];
      if (evaluate(c, l, p, before).allow) {
        CHECK(evaluate(c, l, p, after).allow);
      }
    }
  }

  TEST_CASE("evaluate is pure")
  {
    const PolicyConfig cfg;
    const Identity c = make(1001, 1001, {2000});
    const Identity l = make(1002, 2000);
    const Decision first = evaluate(c, l, 5000, cfg);
    for (int i = 0; i < 10; ++i) {
      CHECK(evaluate(c, l, 5000, cfg) == first);
    }
  }

  TEST_CASE("preliminary check")
  {
    PolicyConfig cfg;
    cfg.exempt_uids = {0};
    CHECK(preliminary_check(make(0, 0), Role::Listener, 8080, cfg) == Preliminary::AllowNow);
    CHECK(preliminary_check(make(1001, 1001), Role::Connector, 8080, cfg) ==
          Preliminary::NeedBoth);
    CHECK(preliminary_check(make(1001, 1001), Role::Listener, 22, cfg) ==
          Preliminary::AllowNow);
    CHECK(preliminary_reason(Role::Listener, 22, cfg) == Reason::PrivilegedPort);
    CHECK(preliminary_reason(Role::Listener, 8080, cfg) == Reason::ExemptListener);
    CHECK(preliminary_reason(Role::Connector, 8080, cfg) == Reason::ExemptConnector);

    // Every privileged port allows on one reply, whoever answered.
    for (std::uint32_t port = 0; port < 1024; ++port) {
      REQUIRE(preliminary_check(make(1001, 1001), Role::Listener,
                                static_cast<std::uint16_t>(port),
                                PolicyConfig{}) == Preliminary::AllowNow);
    }
    // And whenever it says AllowNow, evaluate agrees for any other end.
    for (Uid other : {0u, 1001u, 1002u}) {
      const Identity one = make(0, 0);
      CHECK(evaluate(one, make(other, other), 8080, cfg).allow);
      CHECK(evaluate(make(other, other), one, 8080, cfg).allow);
    }
  }

  TEST_CASE("identity and config validation")
  {
    CHECK_NOTHROW(validate(make(1, 1)));
    CHECK_THROWS_AS(validate(make(1, 1, {}, std::string(256, 'a'))), std::invalid_argument);
    std::set<Gid> many;
    for (Gid g = 0; g < 65; ++g) {
      many.insert(g);
    }
    CHECK_THROWS_AS(validate(make(1, 1, many)), std::invalid_argument);
    CHECK_THROWS_AS(validate(make(1, 1, {}, "bad\xff")), std::invalid_argument);
    PolicyConfig cfg;
    cfg.verdict_timeout_ms = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.verdict_timeout_ms = 1;
    cfg.privileged_port_bound = 65537;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  }
}
