#include "dimae/cli.hpp"

int main(int argc, char** argv) { return dimae::cli::dispatch(argc, argv); }
