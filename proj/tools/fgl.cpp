#include "fgl/cli.hpp"

int main(int argc, char** argv) { return fgl::dispatch(argc, argv); }
