#pragma once

#include "itolab/config.hpp"
#include "itolab/convex_core.hpp"
#include "itolab/decomposition_lab.hpp"
#include "itolab/errors.hpp"
#include "itolab/ito_engine.hpp"
#include "itolab/parallel.hpp"
#include "itolab/path_sim.hpp"
#include "itolab/rng.hpp"
#include "itolab/runner.hpp"
#include "itolab/stats.hpp"
