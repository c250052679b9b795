#include "debiaslens/cli.hpp"

int main(int argc, char** argv) { return debiaslens::run_cli(argc, argv); }
