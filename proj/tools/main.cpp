#include <iostream>

#include "robustit/cli.hpp"

int main(int argc, char** argv) { return rit::run_cli(argc, argv, std::cout, std::cerr); }
