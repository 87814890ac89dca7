#include "rainkit/cli.hpp"

int main(int argc, char** argv) { return rainkit::cli::run(argc, argv); }
