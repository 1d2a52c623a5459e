#include "modmeta/cli.hpp"

int main(int argc, char** argv) { return modmeta::cli::run(argc, argv); }
