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

#ifndef USERVISOR_EXECUTOR_HPP
#define USERVISOR_EXECUTOR_HPP

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <thread>
#include <unordered_map>

namespace uservisor {

using Duration = std::chrono::nanoseconds;

// Time since the executor's epoch. Virtual for scenarios, steady clock for
// live daemons and benchmarks.
using Timestamp = std::chrono::nanoseconds;

using TimerId = std::uint64_t;


// Serial task runner. Every daemon object is confined to one executor and
// only touched from tasks running on it.
class Executor
{
public:
  virtual ~Executor() = default;

  virtual Timestamp now() const = 0;

  virtual void post(std::function<void()> task) = 0;

  virtual TimerId schedule_after(Duration delay, std::function<void()> task) = 0;

  // No-op when the timer already fired or was cancelled.
  virtual void cancel(TimerId id) = 0;
};


// Discrete-event executor over a virtual clock. Tasks due at the same
// instant run in submission order, so a run is a pure function of its
// inputs. Single-threaded.
class VirtualExecutor final : public Executor
{
public:
  Timestamp now() const override { return now_; }

  void post(std::function<void()> task) override;
  TimerId schedule_after(Duration delay, std::function<void()> task) override;
  void cancel(TimerId id) override;

  // Runs the earliest task, advancing the clock to its due time.
  bool step();

  // Runs until nothing is scheduled. Returns the number of tasks run.
  std::size_t run_until_idle();

  // Runs every task due at or before `deadline`, then sets the clock to
  // `deadline`.
  std::size_t run_until(Timestamp deadline);

  std::size_t run_for(Duration duration) { return run_until(now_ + duration); }

  // Runs until `done()` holds or nothing is left.
  bool run_until(const std::function<bool()>& done);

  std::size_t scheduled() const { return queue_.size(); }

private:
  struct Key
  {
    Timestamp due;
    std::uint64_t seq;
    auto operator<=>(const Key&) const = default;
  };

  Timestamp now_{0};
  std::uint64_t next_seq_ = 1;
  std::map<Key, std::function<void()>> queue_;
  std::unordered_map<TimerId, Key> timers_;
};


// Runs tasks on one dedicated thread against the steady clock.
class ThreadExecutor final : public Executor
{
public:
  ThreadExecutor();
  ~ThreadExecutor() override;

  ThreadExecutor(const ThreadExecutor&) = delete;
  ThreadExecutor& operator=(const ThreadExecutor&) = delete;

  Timestamp now() const override;

  void post(std::function<void()> task) override;
  TimerId schedule_after(Duration delay, std::function<void()> task) override;
  void cancel(TimerId id) override;

  // Runs `task` on the executor thread and waits for it.
  void run_sync(const std::function<void()>& task);

  // Stops the thread; pending tasks and timers are discarded.
  void stop();

  bool on_executor_thread() const
  {
    return std::this_thread::get_id() == thread_.get_id();
  }

private:
  struct Key
  {
    Timestamp due;
    std::uint64_t seq;
    auto operator<=>(const Key&) const = default;
  };

  void loop();

  const std::chrono::steady_clock::time_point epoch_;
  mutable std::mutex mutex_;
  std::condition_variable wake_;
  std::map<Key, std::function<void()>> queue_;
  std::unordered_map<TimerId, Key> timers_;
  std::uint64_t next_seq_ = 1;
  bool stopping_ = false;
  std::thread thread_;
};

} // namespace uservisor

#endif // USERVISOR_EXECUTOR_HPP
