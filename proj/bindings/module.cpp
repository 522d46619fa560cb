#include <pybind11/pybind11.h>
PYBIND11_MODULE(_polyboltz, m) { m.doc() = "polyatomic Boltzmann core"; }
