#include <iostream>

#include "aag/cli.hpp"

int main(int argc, char** argv) { return aag::run_cli(argc, argv, std::cout, std::cerr); }
