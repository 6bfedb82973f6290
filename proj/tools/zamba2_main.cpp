// Copyright 2026 The zamba2-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "zamba2/cli.hpp"

int main(int argc, char ** argv) { return zamba2::cli::run(argc, argv); }
