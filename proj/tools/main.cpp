#include "norm3d/cli.hpp"

int main(int argc, char** argv) { return norm3d::cli_main(argc, argv); }
