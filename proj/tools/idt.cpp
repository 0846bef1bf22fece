#include "idt/commands.hpp"

#include <iostream>

int main(int argc, char** argv) { return idt::run_cli(argc, argv, std::cout, std::cerr); }
