#include "hsiseg/cli.hpp"

int main(int argc, char** argv) { return hsiseg::run_cli(argc, argv); }
