#pragma once

#include "hybrid/attention.hpp"
#include "hybrid/backbone.hpp"
#include "hybrid/checkpoint.hpp"
#include "hybrid/config.hpp"
#include "hybrid/dataset.hpp"
#include "hybrid/errors.hpp"
#include "hybrid/evidence.hpp"
#include "hybrid/explain.hpp"
#include "hybrid/image_io.hpp"
#include "hybrid/metrics.hpp"
#include "hybrid/model.hpp"
#include "hybrid/ops.hpp"
#include "hybrid/optim.hpp"
#include "hybrid/param.hpp"
#include "hybrid/rng.hpp"
#include "hybrid/tensor.hpp"
#include "hybrid/train.hpp"
