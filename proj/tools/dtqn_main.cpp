#include "dtqn/cli.hpp"

int main(int argc, char** argv) {
    return dtqn::run_cli(std::vector<std::string>(argv, argv + argc));
}
