#include "rasa/cli.hpp"

int main(int argc, char** argv) { return rasa::run_cli(argc, argv); }
