#include "cli.hpp"

int main(int argc, char** argv) { return latinf::cli::run(argc, argv); }
