#include "cli.hpp"

int main(int argc, char** argv) { return lsnet::cli::run(argc, argv); }
