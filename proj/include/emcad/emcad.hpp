#pragma once

#include "emcad/errors.hpp"
#include "emcad/tensor.hpp"
#include "emcad/ops.hpp"
#include "emcad/autograd.hpp"
#include "emcad/layers.hpp"
#include "emcad/blocks.hpp"
#include "emcad/encoder.hpp"
#include "emcad/loss.hpp"
#include "emcad/optim.hpp"
#include "emcad/gradcheck.hpp"
#include "emcad/gradcheck_suite.hpp"
#include "emcad/npy.hpp"
#include "emcad/data.hpp"
#include "emcad/config.hpp"
#include "emcad/metrics.hpp"
#include "emcad/checkpoint.hpp"
#include "emcad/train.hpp"
