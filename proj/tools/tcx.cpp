#include "tcx/cli.hpp"

int main(int argc, char** argv) { return tcx::cli::run(argc, argv); }
