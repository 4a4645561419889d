#pragma once

#include "inco/tensor.hpp"
#include "inco/layer_key.hpp"
#include "inco/grad_surgery.hpp"
#include "inco/hetero_agg.hpp"
#include "inco/model.hpp"
#include "inco/trainer.hpp"
#include "inco/data.hpp"
#include "inco/metrics.hpp"
#include "inco/convergence.hpp"
#include "inco/sim.hpp"
#include "inco/config.hpp"
