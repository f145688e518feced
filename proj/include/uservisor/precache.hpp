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

#ifndef USERVISOR_PRECACHE_HPP
#define USERVISOR_PRECACHE_HPP

#include <cstddef>
#include <list>
#include <mutex>
#include <optional>
#include <unordered_map>

#include "uservisor/executor.hpp"
#include "uservisor/net.hpp"
#include "uservisor/policy.hpp"

namespace uservisor {

struct PrecacheKey
{
  Protocol protocol = Protocol::Tcp;
  IpAddress address;
  std::uint16_t port = 0;

  bool operator==(const PrecacheKey&) const = default;
};

struct PrecacheKeyHash
{
  std::size_t operator()(const PrecacheKey& key) const;
};


// Socket -> identity mappings announced ahead of time by the owning
// process. LRU-bounded with a per-entry TTL. All operations are atomic with
// respect to each other.
class Precache
{
public:
  Precache(std::size_t capacity, Duration ttl);

  // Inserts or replaces. With capacity 0 this is a no-op.
  void notify(const PrecacheKey& key, const Identity& identity, Timestamp now);

  // Returns the removed identity, if there was one.
  std::optional<Identity> close(const PrecacheKey& key);

  // An unexpired entry, refreshed as most recently used. Expired entries
  // are dropped on the way.
  std::optional<Identity> lookup(const PrecacheKey& key, Timestamp now);

  std::size_t size() const;
  std::size_t capacity() const { return capacity_; }
  Duration ttl() const { return ttl_; }

private:
  struct Entry
  {
    PrecacheKey key;
    Identity identity;
    Timestamp inserted_at;
  };

  const std::size_t capacity_;
  const Duration ttl_;
  mutable std::mutex mutex_;
  // Front is most recently used.
  std::list<Entry> entries_;
  std::unordered_map<PrecacheKey, std::list<Entry>::iterator, PrecacheKeyHash> index_;
};

} // namespace uservisor

#endif // USERVISOR_PRECACHE_HPP
