#pragma once

#include "metal/active.hpp"
#include "metal/adapt.hpp"
#include "metal/baselines.hpp"
#include "metal/config.hpp"
#include "metal/dynmodel.hpp"
#include "metal/envs.hpp"
#include "metal/metrics.hpp"
#include "metal/ndmath/adam.hpp"
#include "metal/ndmath/cg.hpp"
#include "metal/ndmath/dense_array.hpp"
#include "metal/ndmath/mlp.hpp"
#include "metal/ndmath/param_io.hpp"
#include "metal/policy.hpp"
#include "metal/run.hpp"
#include "metal/trainer.hpp"
#include "metal/trpo.hpp"
#include "metal/virtualenv.hpp"
