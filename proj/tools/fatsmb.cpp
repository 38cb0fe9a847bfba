#include "fatsmb/cli.hpp"

int main(int argc, char** argv) { return fatsmb::cli::run(argc, argv); }
