#include "cli.hpp"

int main(int argc, char** argv) { return stealth::run_cli(argc, argv); }
