#include "voxdiff/cli.hpp"

int main(int argc, char** argv) { return voxdiff::cli_main(argc, argv); }
