#include "slidevec/cli.hpp"

int main(int argc, char** argv) { return slidevec::run_cli(argc, argv); }
