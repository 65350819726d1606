#include <iostream>

#include "asdscreen/cli.hpp"

int main(int argc, char** argv) { return asdscreen::cli::run(argc, argv, std::cout, std::cerr); }
