#include "afseg/cli.hpp"

int main(int argc, char** argv) { return afseg::cli_main(argc, argv); }
