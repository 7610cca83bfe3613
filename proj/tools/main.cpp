#include "vtrfeat/cli.hpp"

int main(int argc, char** argv) { return vtrfeat::cli::run(argc, argv); }
