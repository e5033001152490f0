// Copyright 2026 The dynlora Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>
#include <string>
#include <vector>

#include "dynlora/cli.hpp"

int main(int argc, char** argv) {
  return dynlora::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
