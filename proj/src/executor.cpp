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

#include "uservisor/executor.hpp"

#include <future>

namespace uservisor {

void VirtualExecutor::post(std::function<void()> task)
{
  queue_.emplace(Key{now_, next_seq_++}, std::move(task));
}


TimerId VirtualExecutor::schedule_after(
    Duration delay,
    std::function<void()> task)
{
  const Key key{now_ + std::max(delay, Duration::zero()), next_seq_++};
  queue_.emplace(key, std::move(task));
  timers_.emplace(key.seq, key);
  return key.seq;
}


void VirtualExecutor::cancel(TimerId id)
{
  auto it = timers_.find(id);
  if (it == timers_.end()) {
    return;
  }
  queue_.erase(it->second);
  timers_.erase(it);
}


bool VirtualExecutor::step()
{
  if (queue_.empty()) {
    return false;
  }
  auto node = queue_.extract(queue_.begin());
  timers_.erase(node.key().seq);
  now_ = std::max(now_, node.key().due);
  node.mapped()();
  return true;
}


std::size_t VirtualExecutor::run_until_idle()
{
  std::size_t count = 0;
  while (step()) {
    ++count;
  }
  return count;
}


std::size_t VirtualExecutor::run_until(Timestamp deadline)
{
  std::size_t count = 0;
  while (!queue_.empty() && queue_.begin()->first.due <= deadline) {
    step();
    ++count;
  }
  now_ = std::max(now_, deadline);
  return count;
}


bool VirtualExecutor::run_until(const std::function<bool()>& done)
{
  while (!done()) {
    if (!step()) {
      return done();
    }
  }
  return true;
}


ThreadExecutor::ThreadExecutor()
  : epoch_(std::chrono::steady_clock::now()),
    thread_([this] { loop(); })
{}


ThreadExecutor::~ThreadExecutor()
{
  stop();
}


Timestamp ThreadExecutor::now() const
{
  return std::chrono::duration_cast<Timestamp>(
      std::chrono::steady_clock::now() - epoch_);
}


void ThreadExecutor::post(std::function<void()> task)
{
  {
    std::lock_guard lock(mutex_);
    if (stopping_) {
      return;
    }
    queue_.emplace(Key{Timestamp::min(), next_seq_++}, std::move(task));
  }
  wake_.notify_one();
}


TimerId ThreadExecutor::schedule_after(
    Duration delay,
    std::function<void()> task)
{
  TimerId id;
  {
    std::lock_guard lock(mutex_);
    const Key key{now() + std::max(delay, Duration::zero()), next_seq_++};
    id = key.seq;
    if (stopping_) {
      return id;
    }
    queue_.emplace(key, std::move(task));
    timers_.emplace(id, key);
  }
  wake_.notify_one();
  return id;
}


void ThreadExecutor::cancel(TimerId id)
{
  std::lock_guard lock(mutex_);
  auto it = timers_.find(id);
  if (it == timers_.end()) {
    return;
  }
  queue_.erase(it->second);
  timers_.erase(it);
}


void ThreadExecutor::run_sync(const std::function<void()>& task)
{
  if (on_executor_thread()) {
    task();
    return;
  }
  std::promise<void> done;
  auto future = done.get_future();
  post([&] {
    try {
      task();
      done.set_value();
    } catch (...) {
      done.set_exception(std::current_exception());
    }
  });
  future.get();
}


void ThreadExecutor::stop()
{
  {
    std::lock_guard lock(mutex_);
    stopping_ = true;
  }
  wake_.notify_all();
  if (thread_.joinable() && !on_executor_thread()) {
    thread_.join();
  }
}


void ThreadExecutor::loop()
{
  std::unique_lock lock(mutex_);
  while (!stopping_) {
    if (queue_.empty()) {
      wake_.wait(lock);
      continue;
    }
    const Key first = queue_.begin()->first;
    if (first.due > now()) {
      wake_.wait_until(lock, epoch_ + first.due);
      continue;
    }
    auto node = queue_.extract(queue_.begin());
    timers_.erase(first.seq);
    lock.unlock();
    node.mapped()();
    lock.lock();
  }
  queue_.clear();
  timers_.clear();
}

} // namespace uservisor
