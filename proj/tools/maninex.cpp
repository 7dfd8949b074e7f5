#include "maninex/cli.hpp"

int main(int argc, char** argv) { return maninex::cli::run_cli(argc, argv); }
