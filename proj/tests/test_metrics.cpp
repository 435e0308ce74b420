#include <catch2/catch_amalgamated.hpp>
#include "percdl/percdl.hpp"
