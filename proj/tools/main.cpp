#include <iostream>

#include "milscreen/cli.hpp"

int main(int argc, char** argv) { return milscreen::run_cli(argc, argv, std::cout, std::cerr); }
