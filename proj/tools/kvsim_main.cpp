#include <iostream>

#include "kvsim/cli.hpp"

int main(int argc, char** argv) { return kvsim::cli_main(argc, argv, std::cout, std::cerr); }
