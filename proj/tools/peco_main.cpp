#include "peco/cli.hpp"

int main(int argc, char** argv) { return peco::run_cli(argc, argv); }
