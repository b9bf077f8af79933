#include <iostream>

#include "stream4d/cli.hpp"

int main(int argc, char** argv) { return stream4d::cli::run(argc, argv, std::cout, std::cerr); }
