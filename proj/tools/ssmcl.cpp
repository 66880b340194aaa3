#include <iostream>

#include "ssmcl/commands.hpp"

int main(int argc, char** argv) { return ssmcl::run_cli(argc, argv, std::cout, std::cerr); }
