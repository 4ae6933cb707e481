// SPDX-License-Identifier: Apache-2.0
#include "moesqueeze/cli.hpp"

int main(int argc, char** argv) { return moesq::cli::dispatch(argc, argv); }
