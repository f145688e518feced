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

#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "uservisor/policy.hpp"
#include "uservisor/simnet.hpp"
#include "uservisor/wire.hpp"

namespace py = pybind11;
using namespace uservisor;

namespace {

// Addresses and protocols cross the boundary as strings.
template <class T>
void address_property(py::class_<T>& cls, const char* name, IpAddress T::*member)
{
  cls.def_property(
      name, [member](const T& self) { return (self.*member).to_string(); },
      [member](T& self, const std::string& text) { self.*member = IpAddress::parse(text); });
}

template <class T>
void protocol_property(py::class_<T>& cls)
{
  cls.def_property(
      "protocol", [](const T& self) { return std::string(to_string(self.protocol)); },
      [](T& self, const std::string& text) { self.protocol = parse_protocol(text); });
}

py::object parse_json(const std::string& text)
{
  return py::module_::import("json").attr("loads")(text);
}

std::string dump_json(const py::object& value)
{
  return py::module_::import("json").attr("dumps")(value).cast<std::string>();
}

} // namespace


PYBIND11_MODULE(_core, m)
{
  m.doc() = "Per-user network isolation: policy, ident2 wire codec, simulator";

  py::register_exception<wire::FrameError>(m, "FrameError", PyExc_ValueError);
  py::register_exception<wire::EncodeError>(m, "EncodeError", PyExc_ValueError);
  py::register_exception<sim::ScenarioError>(m, "ScenarioError", PyExc_ValueError);

  py::class_<Identity>(m, "Identity")
      .def(py::init([](Uid uid, std::string username, Gid primary_gid, std::set<Gid> sup,
                       Pid pid) {
             return Identity{uid, std::move(username), primary_gid, std::move(sup), pid};
           }),
           py::arg("uid"), py::arg("username") = "", py::arg("primary_gid") = 0,
           py::arg("supplemental_gids") = std::set<Gid>{}, py::arg("pid") = 0)
      .def_readwrite("uid", &Identity::uid)
      .def_readwrite("username", &Identity::username)
      .def_readwrite("primary_gid", &Identity::primary_gid)
      .def_readwrite("supplemental_gids", &Identity::supplemental_gids)
      .def_readwrite("pid", &Identity::pid)
      .def(py::self == py::self)
      .def("__repr__", [](const Identity& i) {
        return "Identity(uid=" + std::to_string(i.uid) + ", username='" + i.username +
               "', primary_gid=" + std::to_string(i.primary_gid) +
               ", pid=" + std::to_string(i.pid) + ")";
      });

  m.def(
      "evaluate",
      [](const Identity& connector, const Identity& listener, std::uint16_t port,
         std::set<Uid> exempt_uids, std::set<std::string> exempt_usernames,
         std::uint32_t privileged_port_bound) {
        PolicyConfig config;
        config.exempt_uids = std::move(exempt_uids);
        config.exempt_usernames = std::move(exempt_usernames);
        config.privileged_port_bound = privileged_port_bound;
        const Decision d = evaluate(connector, listener, port, config);
        return py::make_tuple(d.allow, std::string(to_string(d.reason)));
      },
      py::arg("connector"), py::arg("listener"), py::arg("port"),
      py::arg("exempt_uids") = std::set<Uid>{},
      py::arg("exempt_usernames") = std::set<std::string>{},
      py::arg("privileged_port_bound") = 1024,
      "Returns (allow, reason) for a connection to `port`.");

  py::class_<ConnTuple> tuple(m, "ConnTuple");
  tuple
      .def(py::init([](const std::string& protocol, const std::string& endpoint,
                       const std::string& far) {
             const Endpoint e = Endpoint::parse(endpoint);
             const Endpoint f = Endpoint::parse(far);
             return ConnTuple{parse_protocol(protocol), e.address, e.port, f.address, f.port};
           }),
           py::arg("protocol"), py::arg("endpoint"), py::arg("far"))
      .def_readwrite("endpoint_port", &ConnTuple::endpoint_port)
      .def_readwrite("far_port", &ConnTuple::far_port)
      .def("swapped", &ConnTuple::swapped)
      .def(py::self == py::self)
      .def("__repr__", &ConnTuple::to_string);
  protocol_property(tuple);
  address_property(tuple, "endpoint_addr", &ConnTuple::endpoint_addr);
  address_property(tuple, "far_addr", &ConnTuple::far_addr);

  py::class_<wire::Query>(m, "Query")
      .def(py::init([](std::uint64_t id, const ConnTuple& t, const std::string& target) {
             if (target != "local" && target != "remote") {
               throw py::value_error("target must be 'local' or 'remote'");
             }
             return wire::Query{id, t,
                                target == "local" ? wire::Target::LocalEnd
                                                  : wire::Target::RemoteEnd};
           }),
           py::arg("request_id"), py::arg("tuple"), py::arg("target") = "local")
      .def_readwrite("request_id", &wire::Query::request_id)
      .def_readwrite("tuple", &wire::Query::tuple)
      .def_property_readonly("target",
                             [](const wire::Query& q) {
                               return q.target == wire::Target::LocalEnd ? "local" : "remote";
                             })
      .def(py::self == py::self);

  py::class_<wire::Reply>(m, "Reply")
      .def(py::init([](std::uint64_t id, const std::string& status,
                       std::optional<Identity> identity) {
             wire::ReplyStatus s;
             if (status == "ok") s = wire::ReplyStatus::Ok;
             else if (status == "not-found") s = wire::ReplyStatus::NotFound;
             else if (status == "refused") s = wire::ReplyStatus::Refused;
             else if (status == "error") s = wire::ReplyStatus::Error;
             else throw py::value_error("unknown status '" + status + "'");
             return wire::Reply{id, s, std::move(identity)};
           }),
           py::arg("request_id"), py::arg("status"), py::arg("identity") = std::nullopt)
      .def_readwrite("request_id", &wire::Reply::request_id)
      .def_property_readonly("status",
                             [](const wire::Reply& r) {
                               switch (r.status) {
                                 case wire::ReplyStatus::Ok: return "ok";
                                 case wire::ReplyStatus::NotFound: return "not-found";
                                 case wire::ReplyStatus::Refused: return "refused";
                                 case wire::ReplyStatus::Error: return "error";
                               }
                               return "error";
                             })
      .def_readwrite("identity", &wire::Reply::identity)
      .def(py::self == py::self);

  py::class_<wire::Notify> notify(m, "Notify");
  notify
      .def(py::init([](std::uint64_t id, const std::string& protocol,
                       const std::string& endpoint, const Identity& identity) {
             const Endpoint e = Endpoint::parse(endpoint);
             return wire::Notify{id, parse_protocol(protocol), e.address, e.port, identity};
           }),
           py::arg("request_id"), py::arg("protocol"), py::arg("endpoint"), py::arg("identity"))
      .def_readwrite("request_id", &wire::Notify::request_id)
      .def_readwrite("port", &wire::Notify::port)
      .def_readwrite("identity", &wire::Notify::identity)
      .def(py::self == py::self);
  protocol_property(notify);
  address_property(notify, "address", &wire::Notify::address);

  py::class_<wire::NotifyClose> close(m, "NotifyClose");
  close
      .def(py::init([](std::uint64_t id, const std::string& protocol,
                       const std::string& endpoint) {
             const Endpoint e = Endpoint::parse(endpoint);
             return wire::NotifyClose{id, parse_protocol(protocol), e.address, e.port};
           }),
           py::arg("request_id"), py::arg("protocol"), py::arg("endpoint"))
      .def_readwrite("request_id", &wire::NotifyClose::request_id)
      .def_readwrite("port", &wire::NotifyClose::port)
      .def(py::self == py::self);
  protocol_property(close);
  address_property(close, "address", &wire::NotifyClose::address);

  m.def(
      "encode",
      [](const wire::Message& message) {
        const auto bytes = wire::encode(message);
        return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
      },
      py::arg("message"));

  m.def(
      "decode",
      [](const py::bytes& data) {
        const std::string_view view = data;
        return wire::decode(std::span<const std::uint8_t>(
            reinterpret_cast<const std::uint8_t*>(view.data()), view.size()));
      },
      py::arg("data"));

  m.def(
      "run_scenario",
      [](const py::object& scenario) {
        const std::string text =
            py::isinstance<py::str>(scenario) ? scenario.cast<std::string>() : dump_json(scenario);
        std::string report;
        {
          py::gil_scoped_release release;
          report = sim::run_scenario(sim::Scenario::from_json(nlohmann::json::parse(text)))
                       .to_json()
                       .dump();
        }
        return parse_json(report);
      },
      py::arg("scenario"), "Runs a scenario (dict or JSON text) and returns the report dict.");

  m.def(
      "bench_connections",
      [](std::vector<std::uint32_t> threads, std::uint32_t count, const std::string& mode,
         double resolver_cost_ms) {
        sim::BenchOptions options;
        options.resolver_cost = std::chrono::duration_cast<Duration>(
            std::chrono::duration<double, std::milli>(resolver_cost_ms));
        std::string report;
        {
          py::gil_scoped_release release;
          report = sim::bench_connections(threads, count, sim::parse_bench_mode(mode), options)
                       .to_json()
                       .dump();
        }
        return parse_json(report);
      },
      py::arg("threads"), py::arg("count") = 1000, py::arg("mode") = "on",
      py::arg("resolver_cost_ms") = 1.0);

  m.def(
      "bench_throughput",
      [](std::vector<std::uint64_t> sizes, const std::string& mode, double resolver_cost_ms,
         std::uint32_t repetitions) {
        sim::BenchOptions options;
        options.resolver_cost = std::chrono::duration_cast<Duration>(
            std::chrono::duration<double, std::milli>(resolver_cost_ms));
        std::string report;
        {
          py::gil_scoped_release release;
          report = sim::bench_throughput(sizes, sim::parse_bench_mode(mode), options, repetitions)
                       .to_json()
                       .dump();
        }
        return parse_json(report);
      },
      py::arg("sizes"), py::arg("mode") = "on", py::arg("resolver_cost_ms") = 1.0,
      py::arg("repetitions") = 3);
}
