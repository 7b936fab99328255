#include "cpkd/cli.hpp"

int main(int argc, char** argv) { return cpkd::run_cli(argc, argv); }
