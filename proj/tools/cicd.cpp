#include "cicd/cli.hpp"

int main(int argc, char** argv) { return cicd::cli::run_main(argc, argv); }
