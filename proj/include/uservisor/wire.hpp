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

#ifndef USERVISOR_WIRE_HPP
#define USERVISOR_WIRE_HPP

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "uservisor/net.hpp"
#include "uservisor/policy.hpp"

// ident2 frame format. Every integer is big-endian.
//
//   header (16 bytes)
//     0..2   "ID2"
//     3      version (0x01)
//     4      type: 0x01 QUERY, 0x02 REPLY, 0x03 NOTIFY, 0x04 NOTIFY_CLOSE
//     5      reserved, 0x00
//     6..7   reserved, 0x0000
//     8..15  request id
//
//   QUERY         protocol u8, target u8, endpoint addr[16], endpoint port u16,
//                 far addr[16], far port u16                    (54 bytes)
//   REPLY         status u8, uid u32, pid u32, primary gid u32, ngroups u16,
//                 gids u32[ngroups], username length u8, username
//   NOTIFY        protocol u8, addr[16], port u16, pid u32, uid u32,
//                 primary gid u32, ngroups u16, gids, username length u8,
//                 username
//   NOTIFY_CLOSE  protocol u8, addr[16], port u16               (35 bytes)
//
// On the local stream socket each frame is preceded by its length as a u16.
// Peer datagrams carry exactly one frame with no prefix.

namespace uservisor::wire {

inline constexpr std::uint8_t kVersion = 0x01;
inline constexpr std::size_t kHeaderSize = 16;
inline constexpr std::size_t kQuerySize = 54;
inline constexpr std::size_t kNotifyCloseSize = 35;

enum class MessageType : std::uint8_t
{
  Query = 0x01,
  Reply = 0x02,
  Notify = 0x03,
  NotifyClose = 0x04,
};

enum class Target : std::uint8_t
{
  LocalEnd = 0x00,
  RemoteEnd = 0x01,
};

enum class ReplyStatus : std::uint8_t
{
  Ok = 0,
  NotFound = 1,
  Refused = 2,
  Error = 3,
};

std::string_view to_string(ReplyStatus status);
std::string_view to_string(Target target);


struct Query
{
  std::uint64_t request_id = 0;
  ConnTuple tuple;
  Target target = Target::LocalEnd;

  bool operator==(const Query&) const = default;
};

struct Reply
{
  std::uint64_t request_id = 0;
  ReplyStatus status = ReplyStatus::NotFound;
  // Present iff status == Ok.
  std::optional<Identity> identity;

  static Reply ok(std::uint64_t request_id, Identity identity)
  {
    return Reply{request_id, ReplyStatus::Ok, std::move(identity)};
  }
  static Reply failure(std::uint64_t request_id, ReplyStatus status)
  {
    return Reply{request_id, status, std::nullopt};
  }

  bool operator==(const Reply&) const = default;
};

// Advance notice of a socket's owner, used to fill the precache.
struct Notify
{
  std::uint64_t request_id = 0;
  Protocol protocol = Protocol::Tcp;
  IpAddress address;
  std::uint16_t port = 0;
  Identity identity;

  bool operator==(const Notify&) const = default;
};

struct NotifyClose
{
  std::uint64_t request_id = 0;
  Protocol protocol = Protocol::Tcp;
  IpAddress address;
  std::uint16_t port = 0;

  bool operator==(const NotifyClose&) const = default;
};

using Message = std::variant<Query, Reply, Notify, NotifyClose>;

std::uint64_t request_id_of(const Message& message);
MessageType type_of(const Message& message);


class EncodeError : public std::invalid_argument
{
public:
  using std::invalid_argument::invalid_argument;
};


class FrameError : public std::runtime_error
{
public:
  enum class Kind
  {
    Malformed,
    UnsupportedVersion,
  };

  FrameError(Kind kind, std::size_t offset, const std::string& what);

  Kind kind() const { return kind_; }

  // Byte offset at which parsing failed.
  std::size_t offset() const { return offset_; }

private:
  Kind kind_;
  std::size_t offset_;
};


std::vector<std::uint8_t> encode(const Message& message);

// Strict: any truncation, trailing byte, bad magic, nonzero reserved byte
// or out-of-range field is a FrameError.
Message decode(std::span<const std::uint8_t> bytes);


// Stream framing for the local socket.
std::vector<std::uint8_t> length_prefixed(std::span<const std::uint8_t> frame);

// Accumulates stream bytes and yields whole frames.
class FrameReader
{
public:
  void feed(std::span<const std::uint8_t> bytes);

  // Next complete frame, if one has been fully received.
  std::optional<std::vector<std::uint8_t>> next();

  std::size_t buffered() const { return buffer_.size() - consumed_; }

private:
  std::vector<std::uint8_t> buffer_;
  std::size_t consumed_ = 0;
};

} // namespace uservisor::wire

#endif // USERVISOR_WIRE_HPP
