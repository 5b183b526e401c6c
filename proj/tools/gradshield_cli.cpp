// Copyright 2026 The GradShield Authors.
// SPDX-License-Identifier: Apache-2.0

#include "gradshield/harness/cli.hpp"

int main(int argc, char** argv) { return gradshield::harness::run_cli(argc, argv); }
