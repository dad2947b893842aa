#include <c2fa/cli.hpp>

int main(int argc, char** argv) {
    return c2fa::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
