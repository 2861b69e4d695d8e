#include "rrvq/cli.hpp"

int main(int argc, char** argv) { return rrvq::cli::run(argc, argv); }
