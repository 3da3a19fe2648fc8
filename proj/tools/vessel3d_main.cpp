#include "vessel3d/pipeline.hpp"

int main(int argc, char** argv) { return vessel3d::cli::run_subcommand(argc, argv); }
