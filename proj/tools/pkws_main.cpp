#include "pkws/cli.hpp"

int main(int argc, char** argv) {
    return pkws::run_cli(argc, argv);
}
