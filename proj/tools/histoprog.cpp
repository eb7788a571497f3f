#include "histoprog/cli.hpp"

int main(int argc, char** argv) { return histoprog::cli::run(argc, argv); }
