// Copyright 2026 The imgref Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "imgref/cli.hpp"

int main(int argc, char** argv) { return imgref::cli::run(argc, argv, std::cout, std::cerr); }
