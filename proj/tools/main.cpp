#include <cstdio>

#include <CLI11.hpp>

int main(int argc, char** argv) {
    CLI::App app{"editlab: desk-scale knowledge editing laboratory"};
    app.set_version_flag("--version", EDITLAB_VERSION);
    CLI11_PARSE(app, argc, argv);
    std::printf("%s\n", EDITLAB_VERSION);
    return 0;
}
