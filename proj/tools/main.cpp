#include "commands.hpp"

int main(int argc, char** argv) { return csvnet::app::cli_main(argc, argv); }
