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

#ifndef USERVISOR_CLI_HPP
#define USERVISOR_CLI_HPP

#include <iosfwd>

namespace uservisor::cli {

// Exit codes of every subcommand.
enum ExitCode : int
{
  kExitOk = 0,
  kExitMismatch = 1,
  kExitConfig = 2,
  kExitRuntime = 3,
};

// Entry point of the `uservisor` executable.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace uservisor::cli

#endif // USERVISOR_CLI_HPP
