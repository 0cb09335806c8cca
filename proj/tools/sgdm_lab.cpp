#include "sgdm/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return sgdm::run_cli(argc, argv, std::cout, std::cerr); }
