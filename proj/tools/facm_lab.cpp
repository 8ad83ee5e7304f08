#include "facm/cli.hpp"

int main(int argc, char** argv) { return facm::cli::run(argc, argv); }
