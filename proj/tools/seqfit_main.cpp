#include "seqfit/cli.hpp"

int main(int argc, char** argv) { return seqfit::run_cli(argc, argv); }
