// Python bindings for the core operations.
#include <pybind11/pybind11.h>

PYBIND11_MODULE(_lalign, m) { m.doc() = "placeholder"; }
