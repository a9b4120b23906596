#include "brainage/cli.hpp"

int main(int argc, char** argv) { return brainage::run_cli(argc, argv); }
