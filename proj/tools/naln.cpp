#include <iostream>

#include "naln/cli.hpp"

int main(int argc, char** argv) { return naln::run_cli(argc, argv, std::cout, std::cerr); }
