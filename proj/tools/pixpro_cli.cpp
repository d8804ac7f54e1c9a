#include "pixpro/cli.hpp"

int main(int argc, char** argv) { return pixpro::cli_main(argc, argv); }
