#include "lorarank/cli.hpp"

int main(int argc, char** argv) { return lorarank::cli_dispatch(argc, argv); }
