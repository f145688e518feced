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

#include <deque>
#include <map>
#include <random>

#include <stdexcept>

#include <doctest.h>

#include "uservisor/precache.hpp"

using namespace uservisor;
using namespace std::chrono_literals;

namespace {

PrecacheKey key(std::uint16_t port)
{
  return PrecacheKey{Protocol::Tcp, IpAddress::parse("10.0.0.2"), port};
}

Identity who(Pid pid)
{
  return Identity{1001, "alice", 1001, {}, pid};
}

} // namespace


TEST_SUITE("precache")
{
  TEST_CASE("insert, close, lookup")
  {
    Precache cache(16, 60s);
    cache.notify(key(1), who(10), Timestamp{0});
    CHECK(cache.lookup(key(1), Timestamp{0})->pid == 10);
    cache.notify(key(1), who(11), Timestamp{0});
    CHECK(cache.lookup(key(1), Timestamp{0})->pid == 11);
    CHECK(cache.size() == 1);
    CHECK(cache.close(key(1))->pid == 11);
    CHECK_FALSE(cache.lookup(key(1), Timestamp{0}));
    CHECK_FALSE(cache.close(key(1)));
  }

  TEST_CASE("entries expire after the ttl")
  {
    Precache cache(16, 60s);
    cache.notify(key(1), who(10), Timestamp{0});
    CHECK(cache.lookup(key(1), Timestamp{59s}));
    CHECK_FALSE(cache.lookup(key(1), Timestamp{61s}));
    CHECK(cache.size() == 0);
  }

  TEST_CASE("capacity zero drops notifications")
  {
    Precache cache(0, 60s);
    cache.notify(key(1), who(10), Timestamp{0});
    CHECK_FALSE(cache.lookup(key(1), Timestamp{0}));
    CHECK(cache.size() == 0);
  }

  TEST_CASE("capacity 2, three inserts evicts the first")
  {
    Precache cache(2, 60s);
    cache.notify(key(1), who(1), Timestamp{0});
    cache.notify(key(2), who(2), Timestamp{0});
    cache.notify(key(3), who(3), Timestamp{0});
    CHECK_FALSE(cache.lookup(key(1), Timestamp{0}));
    CHECK(cache.lookup(key(2), Timestamp{0}));
    CHECK(cache.lookup(key(3), Timestamp{0}));
  }

  TEST_CASE("LRU order matches a replayed model")
  {
    // Model: front = most recently used.
    std::mt19937 rng(3);
    const std::size_t capacity = 8;
    Precache cache(capacity, 3600s);
    std::deque<std::uint16_t> order;
    std::map<std::uint16_t, Pid> values;
    auto touch = [&](std::uint16_t k) {
      std::erase(order, k);
      order.push_front(k);
    };
    for (int step = 0; step < 5000; ++step) {
      const auto k = static_cast<std::uint16_t>(rng() % 20);
      switch (rng() % 3) {
        case 0: {
          const Pid pid = static_cast<Pid>(step + 1);
          cache.notify(key(k), who(pid), Timestamp{0});
          touch(k);
          values[k] = pid;
          if (order.size() > capacity) {
            values.erase(order.back());
            order.pop_back();
          }
          break;
        }
        case 1: {
          const auto got = cache.lookup(key(k), Timestamp{0});
          const bool expected = values.count(k) > 0;
          REQUIRE(got.has_value() == expected);
          if (expected) {
            CHECK(got->pid == values[k]);
            touch(k);
          }
          break;
        }
        default: {
          const auto got = cache.close(key(k));
          REQUIRE(got.has_value() == (values.count(k) > 0));
          values.erase(k);
          std::erase(order, k);
          break;
        }
      }
      REQUIRE(cache.size() == values.size());
    }
  }
}
