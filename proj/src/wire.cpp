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

#include "uservisor/wire.hpp"

#include <algorithm>
#include <cstring>
#include <limits>

namespace uservisor::wire {

namespace {

constexpr std::uint8_t kMagic[3] = {'I', 'D', '2'};

class Writer
{
public:
  void u8(std::uint8_t v) { out_.push_back(v); }

  void u16(std::uint16_t v)
  {
    out_.push_back(static_cast<std::uint8_t>(v >> 8));
    out_.push_back(static_cast<std::uint8_t>(v));
  }

  void u32(std::uint32_t v)
  {
    for (int shift = 24; shift >= 0; shift -= 8) {
      out_.push_back(static_cast<std::uint8_t>(v >> shift));
    }
  }

  void u64(std::uint64_t v)
  {
    for (int shift = 56; shift >= 0; shift -= 8) {
      out_.push_back(static_cast<std::uint8_t>(v >> shift));
    }
  }

  void address(const IpAddress& a)
  {
    out_.insert(out_.end(), a.bytes().begin(), a.bytes().end());
  }

  void bytes(std::string_view s) { out_.insert(out_.end(), s.begin(), s.end()); }

  std::vector<std::uint8_t> take() { return std::move(out_); }

private:
  std::vector<std::uint8_t> out_;
};


class Reader
{
public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  std::size_t offset() const { return pos_; }

  std::uint8_t u8(const char* field)
  {
    need(1, field);
    return in_[pos_++];
  }

  std::uint16_t u16(const char* field)
  {
    need(2, field);
    const auto v = static_cast<std::uint16_t>((in_[pos_] << 8) | in_[pos_ + 1]);
    pos_ += 2;
    return v;
  }

  std::uint32_t u32(const char* field)
  {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v = (v << 8) | in_[pos_ + i];
    }
    pos_ += 4;
    return v;
  }

  std::uint64_t u64(const char* field)
  {
    need(8, field);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v = (v << 8) | in_[pos_ + i];
    }
    pos_ += 8;
    return v;
  }

  IpAddress address(const char* field)
  {
    need(16, field);
    IpAddress::Bytes bytes;
    std::copy_n(in_.begin() + pos_, 16, bytes.begin());
    pos_ += 16;
    return IpAddress(bytes);
  }

  std::string text(std::size_t length, const char* field)
  {
    need(length, field);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), length);
    pos_ += length;
    return s;
  }

  [[noreturn]] void fail(std::size_t at, const std::string& what) const
  {
    throw FrameError(FrameError::Kind::Malformed, at, what);
  }

  void finish() const
  {
    if (pos_ != in_.size()) {
      fail(pos_, std::to_string(in_.size() - pos_) + " trailing byte(s)");
    }
  }

private:
  void need(std::size_t n, const char* field) const
  {
    if (in_.size() - pos_ < n) {
      fail(pos_, std::string("truncated frame reading ") + field);
    }
  }

  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};


void write_header(Writer& w, MessageType type, std::uint64_t request_id)
{
  w.u8(kMagic[0]);
  w.u8(kMagic[1]);
  w.u8(kMagic[2]);
  w.u8(kVersion);
  w.u8(static_cast<std::uint8_t>(type));
  w.u8(0);
  w.u16(0);
  w.u64(request_id);
}


void write_identity_tail(Writer& w, const Identity& identity)
{
  // ngroups, gids, username; shared by REPLY and NOTIFY.
  w.u16(static_cast<std::uint16_t>(identity.supplemental_gids.size()));
  for (Gid gid : identity.supplemental_gids) {
    w.u32(gid);
  }
  w.u8(static_cast<std::uint8_t>(identity.username.size()));
  w.bytes(identity.username);
}


void check_encodable(const Identity& identity)
{
  try {
    validate(identity);
  } catch (const std::invalid_argument& e) {
    throw EncodeError(e.what());
  }
}


void read_identity_tail(Reader& r, Identity& identity)
{
  const std::size_t ngroups_at = r.offset();
  const std::uint16_t ngroups = r.u16("ngroups");
  if (ngroups > kMaxSupplementalGids) {
    r.fail(ngroups_at, "ngroups " + std::to_string(ngroups) + " exceeds " +
                           std::to_string(kMaxSupplementalGids));
  }
  std::optional<Gid> previous;
  for (std::uint16_t i = 0; i < ngroups; ++i) {
    const std::size_t at = r.offset();
    const Gid gid = r.u32("supplemental gid");
    // Groups are encoded strictly ascending; anything else has no
    // canonical decoding.
    if (previous && gid <= *previous) {
      r.fail(at, "supplemental gids not strictly ascending");
    }
    identity.supplemental_gids.insert(gid);
    previous = gid;
  }
  const std::uint8_t length = r.u8("username length");
  const std::size_t name_at = r.offset();
  identity.username = r.text(length, "username");
  if (!is_valid_utf8(identity.username)) {
    r.fail(name_at, "username is not valid UTF-8");
  }
}


Protocol read_protocol(Reader& r)
{
  const std::size_t at = r.offset();
  const std::uint8_t value = r.u8("protocol");
  if (!is_valid_protocol(value)) {
    r.fail(at, "unknown protocol " + std::to_string(value));
  }
  return static_cast<Protocol>(value);
}

} // namespace


std::string_view to_string(ReplyStatus status)
{
  switch (status) {
    case ReplyStatus::Ok: return "ok";
    case ReplyStatus::NotFound: return "not found";
    case ReplyStatus::Refused: return "refused";
    case ReplyStatus::Error: return "error";
  }
  return "unknown";
}


std::string_view to_string(Target target)
{
  return target == Target::LocalEnd ? "local" : "remote";
}


FrameError::FrameError(Kind kind, std::size_t offset, const std::string& what)
  : std::runtime_error(what + " (offset " + std::to_string(offset) + ")"),
    kind_(kind),
    offset_(offset)
{}


std::uint64_t request_id_of(const Message& message)
{
  return std::visit([](const auto& m) { return m.request_id; }, message);
}


MessageType type_of(const Message& message)
{
  switch (message.index()) {
    case 0: return MessageType::Query;
    case 1: return MessageType::Reply;
    case 2: return MessageType::Notify;
    default: return MessageType::NotifyClose;
  }
}


std::vector<std::uint8_t> encode(const Message& message)
{
  Writer w;
  write_header(w, type_of(message), request_id_of(message));

  if (const auto* q = std::get_if<Query>(&message)) {
    w.u8(static_cast<std::uint8_t>(q->tuple.protocol));
    w.u8(static_cast<std::uint8_t>(q->target));
    w.address(q->tuple.endpoint_addr);
    w.u16(q->tuple.endpoint_port);
    w.address(q->tuple.far_addr);
    w.u16(q->tuple.far_port);
  } else if (const auto* reply = std::get_if<Reply>(&message)) {
    const bool ok = reply->status == ReplyStatus::Ok;
    if (ok != reply->identity.has_value()) {
      throw EncodeError("reply identity must be present iff status is ok");
    }
    w.u8(static_cast<std::uint8_t>(reply->status));
    if (ok) {
      const Identity& id = *reply->identity;
      check_encodable(id);
      w.u32(id.uid);
      w.u32(id.pid);
      w.u32(id.primary_gid);
      write_identity_tail(w, id);
    } else {
      w.u32(0);
      w.u32(0);
      w.u32(0);
      w.u16(0);
      w.u8(0);
    }
  } else if (const auto* n = std::get_if<Notify>(&message)) {
    check_encodable(n->identity);
    w.u8(static_cast<std::uint8_t>(n->protocol));
    w.address(n->address);
    w.u16(n->port);
    w.u32(n->identity.pid);
    w.u32(n->identity.uid);
    w.u32(n->identity.primary_gid);
    write_identity_tail(w, n->identity);
  } else {
    const auto& c = std::get<NotifyClose>(message);
    w.u8(static_cast<std::uint8_t>(c.protocol));
    w.address(c.address);
    w.u16(c.port);
  }
  return w.take();
}


Message decode(std::span<const std::uint8_t> bytes)
{
  Reader r(bytes);

  for (std::size_t i = 0; i < 3; ++i) {
    if (r.u8("magic") != kMagic[i]) {
      r.fail(i, "bad magic");
    }
  }
  const std::uint8_t version = r.u8("version");
  if (version != kVersion) {
    throw FrameError(FrameError::Kind::UnsupportedVersion, 3,
                     "unsupported version " + std::to_string(version));
  }
  const std::uint8_t type = r.u8("type");
  if (r.u8("reserved") != 0) {
    r.fail(5, "reserved byte is nonzero");
  }
  if (r.u16("reserved") != 0) {
    r.fail(6, "reserved bytes are nonzero");
  }
  const std::uint64_t request_id = r.u64("request id");

  switch (static_cast<MessageType>(type)) {
    case MessageType::Query: {
      Query q;
      q.request_id = request_id;
      q.tuple.protocol = read_protocol(r);
      const std::size_t target_at = r.offset();
      const std::uint8_t target = r.u8("target");
      if (target > 1) {
        r.fail(target_at, "unknown target " + std::to_string(target));
      }
      q.target = static_cast<Target>(target);
      q.tuple.endpoint_addr = r.address("endpoint address");
      q.tuple.endpoint_port = r.u16("endpoint port");
      q.tuple.far_addr = r.address("far address");
      q.tuple.far_port = r.u16("far port");
      r.finish();
      return q;
    }
    case MessageType::Reply: {
      Reply reply;
      reply.request_id = request_id;
      const std::size_t status_at = r.offset();
      const std::uint8_t status = r.u8("status");
      if (status > static_cast<std::uint8_t>(ReplyStatus::Error)) {
        r.fail(status_at, "unknown status " + std::to_string(status));
      }
      reply.status = static_cast<ReplyStatus>(status);
      const std::size_t identity_at = r.offset();
      Identity id;
      id.uid = r.u32("uid");
      id.pid = r.u32("pid");
      id.primary_gid = r.u32("primary gid");
      read_identity_tail(r, id);
      r.finish();
      if (reply.status == ReplyStatus::Ok) {
        reply.identity = std::move(id);
      } else if (!(id == Identity{})) {
        r.fail(identity_at, "identity fields set on a non-ok reply");
      }
      return reply;
    }
    case MessageType::Notify: {
      Notify n;
      n.request_id = request_id;
      n.protocol = read_protocol(r);
      n.address = r.address("address");
      n.port = r.u16("port");
      n.identity.pid = r.u32("pid");
      n.identity.uid = r.u32("uid");
      n.identity.primary_gid = r.u32("primary gid");
      read_identity_tail(r, n.identity);
      r.finish();
      return n;
    }
    case MessageType::NotifyClose: {
      NotifyClose c;
      c.request_id = request_id;
      c.protocol = read_protocol(r);
      c.address = r.address("address");
      c.port = r.u16("port");
      r.finish();
      return c;
    }
  }
  r.fail(4, "unknown message type " + std::to_string(type));
}


std::vector<std::uint8_t> length_prefixed(std::span<const std::uint8_t> frame)
{
  if (frame.size() > std::numeric_limits<std::uint16_t>::max()) {
    throw EncodeError("frame too large for the local stream framing");
  }
  std::vector<std::uint8_t> out;
  out.reserve(frame.size() + 2);
  out.push_back(static_cast<std::uint8_t>(frame.size() >> 8));
  out.push_back(static_cast<std::uint8_t>(frame.size()));
  out.insert(out.end(), frame.begin(), frame.end());
  return out;
}


void FrameReader::feed(std::span<const std::uint8_t> bytes)
{
  if (consumed_ > 0 && consumed_ == buffer_.size()) {
    buffer_.clear();
    consumed_ = 0;
  }
  buffer_.insert(buffer_.end(), bytes.begin(), bytes.end());
}


std::optional<std::vector<std::uint8_t>> FrameReader::next()
{
  if (buffered() < 2) {
    return std::nullopt;
  }
  const std::size_t length =
      (std::size_t(buffer_[consumed_]) << 8) | buffer_[consumed_ + 1];
  if (buffered() < 2 + length) {
    return std::nullopt;
  }
  std::vector<std::uint8_t> frame(buffer_.begin() + consumed_ + 2,
                                  buffer_.begin() + consumed_ + 2 + length);
  consumed_ += 2 + length;
  if (consumed_ > 4096 && consumed_ * 2 > buffer_.size()) {
    buffer_.erase(buffer_.begin(), buffer_.begin() + consumed_);
    consumed_ = 0;
  }
  return frame;
}

} // namespace uservisor::wire
