#include "levasa/cli.hpp"

int main(int argc, char** argv) { return levasa::cli::run(argc, argv); }
