// Pipeline driver: assemble, analyze, instrument, run, attack, evaluate.
#include "cipherbench/assembler.hpp"
#include "cipherbench/interpreter.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
    CLI::App app{"ciphertext side-channel hardening workbench"};
    app.require_subcommand(1);
    std::cout << "stub" << std::endl;
    CLI11_PARSE(app, argc, argv);
    return 0;
}
