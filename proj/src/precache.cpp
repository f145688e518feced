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

#include "uservisor/precache.hpp"

namespace uservisor {

std::size_t PrecacheKeyHash::operator()(const PrecacheKey& key) const
{
  return hash_value(ConnTuple{key.protocol, key.address, key.port, {}, 0});
}


Precache::Precache(std::size_t capacity, Duration ttl)
  : capacity_(capacity), ttl_(ttl)
{}


void Precache::notify(const PrecacheKey& key, const Identity& identity, Timestamp now)
{
  if (capacity_ == 0) {
    return;
  }
  std::lock_guard lock(mutex_);
  if (auto it = index_.find(key); it != index_.end()) {
    entries_.erase(it->second);
    index_.erase(it);
  }
  while (entries_.size() >= capacity_) {
    index_.erase(entries_.back().key);
    entries_.pop_back();
  }
  entries_.push_front(Entry{key, identity, now});
  index_.emplace(key, entries_.begin());
}


std::optional<Identity> Precache::close(const PrecacheKey& key)
{
  std::lock_guard lock(mutex_);
  auto it = index_.find(key);
  if (it == index_.end()) {
    return std::nullopt;
  }
  Identity identity = std::move(it->second->identity);
  entries_.erase(it->second);
  index_.erase(it);
  return identity;
}


std::optional<Identity> Precache::lookup(const PrecacheKey& key, Timestamp now)
{
  std::lock_guard lock(mutex_);
  auto it = index_.find(key);
  if (it == index_.end()) {
    return std::nullopt;
  }
  if (now - it->second->inserted_at > ttl_) {
    entries_.erase(it->second);
    index_.erase(it);
    return std::nullopt;
  }
  entries_.splice(entries_.begin(), entries_, it->second);
  return entries_.front().identity;
}


std::size_t Precache::size() const
{
  std::lock_guard lock(mutex_);
  return entries_.size();
}

} // namespace uservisor
