#include "mmvae/cli.hpp"

int main(int argc, char** argv) { return mmvae::run_cli(argc, argv); }
