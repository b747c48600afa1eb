#include <iostream>

#include "dorasim/cli.hpp"

int main(int argc, char** argv) { return dorasim::cli_main(argc, argv, std::cout, std::cerr); }
