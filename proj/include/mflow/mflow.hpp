#pragma once

#include "mflow/autodiff.hpp"
#include "mflow/checkpoint.hpp"
#include "mflow/config.hpp"
#include "mflow/data.hpp"
#include "mflow/flows.hpp"
#include "mflow/metrics.hpp"
#include "mflow/numdiff.hpp"
#include "mflow/objective.hpp"
#include "mflow/rng.hpp"
#include "mflow/training.hpp"
