#include <iostream>

#include "affdepth/cli.hpp"

int main(int argc, char** argv) { return affdepth::cli::run(argc, argv, std::cout, std::cerr); }
