#pragma once

#include "percdl/common.hpp"
#include "percdl/core.hpp"
#include "percdl/federated.hpp"
#include "percdl/io.hpp"
#include "percdl/metrics.hpp"
#include "percdl/solvers.hpp"
#include "percdl/synth.hpp"
#include "percdl/transforms.hpp"
#include "percdl/warp.hpp"
