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

#include "generators.hpp"
#include "golden.hpp"
#include "uservisor/wire.hpp"

using namespace uservisor;
using namespace uservisor::testing;

namespace {

wire::FrameError::Kind decode_error(const std::vector<std::uint8_t>& bytes)
{
  try {
    wire::decode(bytes);
  } catch (const wire::FrameError& e) {
    return e.kind();
  }
  FAIL("decode accepted a bad frame");
  return wire::FrameError::Kind::Malformed;
}

} // namespace


TEST_SUITE("wire")
{
  TEST_CASE("golden query")
  {
    const auto bytes = golden_query();
    REQUIRE(bytes.size() == 54);
    CHECK(wire::encode(golden_query_message()) == bytes);
    CHECK(std::get<wire::Query>(wire::decode(bytes)) == golden_query_message());
  }

  TEST_CASE("golden reply")
  {
    const auto bytes = golden_reply();
    REQUIRE(bytes.size() == 41);
    CHECK(wire::encode(golden_reply_message()) == bytes);
    CHECK(std::get<wire::Reply>(wire::decode(bytes)) == golden_reply_message());
  }

  TEST_CASE("golden notify and notify-close")
  {
    CHECK(wire::encode(golden_notify_message()) == golden_notify());
    CHECK(std::get<wire::Notify>(wire::decode(golden_notify())) == golden_notify_message());
    REQUIRE(golden_notify_close().size() == 35);
    CHECK(wire::encode(golden_notify_close_message()) == golden_notify_close());
    CHECK(std::get<wire::NotifyClose>(wire::decode(golden_notify_close())) ==
          golden_notify_close_message());
  }

  TEST_CASE("failure replies carry zeroed identity fields")
  {
    const auto bytes = wire::encode(wire::Reply::failure(9, wire::ReplyStatus::Refused));
    REQUIRE(bytes.size() == 32);
    CHECK(bytes[16] == 0x02);
    for (std::size_t i = 17; i < bytes.size(); ++i) {
      CHECK(bytes[i] == 0);
    }
    auto tampered = bytes;
    tampered[20] = 1;
    CHECK(decode_error(tampered) == wire::FrameError::Kind::Malformed);
  }

  TEST_CASE("every truncation is malformed")
  {
    for (const auto& frame :
         {golden_query(), golden_reply(), golden_notify(), golden_notify_close()}) {
      for (std::size_t n = 0; n < frame.size(); ++n) {
        const std::vector<std::uint8_t> prefix(frame.begin(), frame.begin() + n);
        CHECK(decode_error(prefix) == wire::FrameError::Kind::Malformed);
      }
    }
  }

  TEST_CASE("first 10 bytes of a query report where parsing stopped")
  {
    const auto frame = golden_query();
    try {
      wire::decode(std::span(frame.data(), 10));
      FAIL("accepted");
    } catch (const wire::FrameError& e) {
      CHECK(e.kind() == wire::FrameError::Kind::Malformed);
      CHECK(e.offset() <= 10);
    }
  }

  TEST_CASE("strictness")
  {
    auto frame = golden_query();
    frame[3] = 0x02;
    CHECK(decode_error(frame) == wire::FrameError::Kind::UnsupportedVersion);

    frame = golden_query();
    frame[0] = 'X';
    CHECK(decode_error(frame) == wire::FrameError::Kind::Malformed);

    frame = golden_query();
    frame.push_back(0);
    CHECK(decode_error(frame) == wire::FrameError::Kind::Malformed);

    for (std::size_t reserved : {5u, 6u, 7u}) {
      frame = golden_query();
      frame[reserved] = 1;
      CHECK(decode_error(frame) == wire::FrameError::Kind::Malformed);
    }

    frame = golden_query();
    frame[4] = 0x05;
    CHECK(decode_error(frame) == wire::FrameError::Kind::Malformed);

    frame = golden_query();
    frame[16] = 0x01;
    CHECK(decode_error(frame) == wire::FrameError::Kind::Malformed);

    frame = golden_query();
    frame[17] = 0x02;
    CHECK(decode_error(frame) == wire::FrameError::Kind::Malformed);

    frame = golden_reply();
    frame[16] = 0x04;
    CHECK(decode_error(frame) == wire::FrameError::Kind::Malformed);

    // Username length pointing past the end.
    frame = golden_reply();
    frame[35] = 0x06;
    CHECK(decode_error(frame) == wire::FrameError::Kind::Malformed);

    // Invalid UTF-8 username.
    frame = golden_reply();
    frame[36] = 0xff;
    CHECK(decode_error(frame) == wire::FrameError::Kind::Malformed);
  }

  TEST_CASE("encode rejects oversized identities")
  {
    Identity id{1, std::string(256, 'x'), 1, {}, 1};
    CHECK_THROWS_AS(wire::encode(wire::Reply::ok(1, id)), wire::EncodeError);
    id.username = "ok";
    for (Gid g = 0; g < 65; ++g) {
      id.supplemental_gids.insert(g);
    }
    CHECK_THROWS_AS(wire::encode(wire::Reply::ok(1, id)), wire::EncodeError);
    id.supplemental_gids.erase(0);
    CHECK_NOTHROW(wire::encode(wire::Reply::ok(1, id)));
  }

  TEST_CASE("random round trip")
  {
    std::mt19937_64 rng(0xc0dec);
    for (int i = 0; i < 10000; ++i) {
      const wire::Message m = random_message(rng);
      const auto bytes = wire::encode(m);
      REQUIRE(wire::decode(bytes) == m);
      CHECK(wire::request_id_of(m) == wire::request_id_of(wire::decode(bytes)));
    }
  }

  TEST_CASE("stream framing")
  {
    const auto a = golden_query();
    const auto b = golden_reply();
    auto stream = wire::length_prefixed(a);
    REQUIRE(stream.size() == a.size() + 2);
    CHECK(stream[0] == 0);
    CHECK(stream[1] == 54);
    const auto second = wire::length_prefixed(b);
    stream.insert(stream.end(), second.begin(), second.end());

    // Fed one byte at a time, both frames come out whole and in order.
    wire::FrameReader reader;
    std::vector<std::vector<std::uint8_t>> frames;
    for (std::uint8_t byte : stream) {
      reader.feed(std::span(&byte, 1));
      while (auto f = reader.next()) {
        frames.push_back(*f);
      }
    }
    REQUIRE(frames.size() == 2);
    CHECK(frames[0] == a);
    CHECK(frames[1] == b);
    CHECK(reader.buffered() == 0);
  }
}
