#include "ciasa/harness.hpp"

int main(int argc, char** argv) { return ciasa::cli_main(argc, argv); }
