# Licensed to the Apache Software Foundation (ASF) under one
# or more contributor license agreements.  See the NOTICE file
# distributed with this work for additional information
# regarding copyright ownership.  The ASF licenses this file
# to you under the Apache License, Version 2.0 (the
# "License"); you may not use this file except in compliance
# with the License.  You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

import json
import os
import pathlib

import pytest

import uservisor as uv

ROOT = pathlib.Path(os.environ.get("USERVISOR_SOURCE_DIR",
                                   pathlib.Path(__file__).resolve().parents[2]))


def test_same_user_allowed():
    alice = uv.Identity(1001, "alice", 1001)
    assert uv.evaluate(alice, alice, 5000) == (True, "UserMatch")


def test_cross_user_denied():
    alice = uv.Identity(1001, "alice", 1001)
    bob = uv.Identity(1002, "bob", 1002)
    assert uv.evaluate(bob, alice, 5000) == (False, "NoRuleMatched")
    assert uv.evaluate(bob, alice, 22) == (True, "PrivilegedPort")
    assert uv.evaluate(bob, alice, 5000, exempt_usernames={"alice"}) == (True, "ExemptListener")


def test_group_rule_uses_connector_groups_only():
    project = uv.Identity(1001, "alice", 2000)
    bob = uv.Identity(1002, "bob", 1002, {2000})
    assert uv.evaluate(bob, project, 5000) == (True, "GroupMatch")
    assert uv.evaluate(project, bob, 5000)[0] is False


def test_codec_round_trip():
    t = uv.ConnTuple("tcp", "10.0.0.2:5000", "10.0.0.1:40000")
    messages = [
        uv.Query(1, t, "remote"),
        uv.Reply(2, "ok", uv.Identity(1001, "alice", 1001, {2000}, 4242)),
        uv.Reply(3, "not-found"),
        uv.Notify(4, "udp", "[::1]:53", uv.Identity(0, "root", 0, set(), 1)),
        uv.NotifyClose(5, "udp", "[::1]:53"),
    ]
    for m in messages:
        data = uv.encode(m)
        assert isinstance(data, bytes)
        assert uv.decode(data) == m
    assert uv.decode(uv.encode(messages[0])).tuple.far_port == 40000


def test_decode_rejects_garbage():
    with pytest.raises(uv.FrameError):
        uv.decode(b"\x00\x01\x02")
    frame = uv.encode(uv.NotifyClose(5, "tcp", "10.0.0.1:1"))
    with pytest.raises(ValueError):
        uv.decode(frame + b"\x00")


def test_isolation_scenario():
    scenario = json.loads((ROOT / "scenarios" / "isolation.json").read_text())
    report = uv.run_scenario(scenario)
    assert report["summary"]["failed"] == 0
    assert report["summary"]["attempts"] == len(scenario["attempts"])
    assert uv.run_scenario(json.dumps(scenario)) == report


def test_invalid_scenario():
    with pytest.raises(uv.ScenarioError):
        uv.run_scenario({"hosts": [], "bogus": 1})


def test_bench_smoke():
    report = uv.bench_connections([1], count=5, mode="on", resolver_cost_ms=0.1)
    assert report["kind"] == "connections"
    assert report["rows"][0]["total_connections"] == 5
    assert report["rows"][0]["time_s"] > 0
