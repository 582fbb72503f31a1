#include "maskdoor/cli.hpp"

int main(int argc, char** argv) { return maskdoor::cli::run_cli(argc, argv); }
