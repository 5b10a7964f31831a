#include "dpt/cli.hpp"

int main(int argc, char** argv) { return dpt::run_cli(argc, argv); }
