#include <iostream>

#include "ctrack/cli.hpp"

int main(int argc, char** argv) { return ctrack::run_cli(argc, argv, std::cout, std::cerr); }
