#include "lreach/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return lreach::run_cli(argc, argv, std::cout, std::cerr); }
