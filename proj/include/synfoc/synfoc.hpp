#pragma once

#include "synfoc/tensor.hpp"
#include "synfoc/autodiff.hpp"
#include "synfoc/grad_check.hpp"
#include "synfoc/optim.hpp"
#include "synfoc/rng.hpp"
#include "synfoc/models.hpp"
#include "synfoc/checkpoint.hpp"
#include "synfoc/data.hpp"
#include "synfoc/core.hpp"
#include "synfoc/metrics.hpp"
#include "synfoc/config.hpp"
#include "synfoc/trainer.hpp"
