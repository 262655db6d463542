#include "ipwd/cli.hpp"

int main(int argc, char** argv) { return ipwd::run(argc, argv); }
