#include "refuel/cli.hpp"

int main(int argc, char** argv) { return refuel::cli::dispatch(argc, argv); }
