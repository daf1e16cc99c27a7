#include "cli_app.hpp"

int main(int argc, char** argv) { return flowvae::cli::run(argc, argv); }
