// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "damex/cli.hpp"

int main(int argc, char** argv) { return damex::run_cli(argc, argv, std::cout, std::cerr); }
