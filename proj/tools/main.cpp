#include <iostream>

#include "cli.hpp"

int main(int argc, char** argv) { return p2i::cli::run(argc, argv, std::cout, std::cerr); }
