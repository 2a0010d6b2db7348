#include "sepsis/cli.hpp"

int main(int argc, char** argv) { return sepsis::cli::run(argc, argv); }
