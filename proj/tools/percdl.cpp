#include <cstdio>

#include "percdl/percdl.hpp"

int main() {
  std::puts("percdl placeholder");
  return 0;
}
