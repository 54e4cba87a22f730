#include "tatl/cli.hpp"

int main(int argc, char** argv) { return tatl::run_cli(argc, argv); }
