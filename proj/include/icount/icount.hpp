#pragma once

#include "icount/tensor.hpp"
#include "icount/ops.hpp"
#include "icount/optim.hpp"
#include "icount/random.hpp"
#include "icount/network.hpp"
#include "icount/dmcount.hpp"
#include "icount/image_io.hpp"
#include "icount/data.hpp"
#include "icount/methods.hpp"
#include "icount/metrics.hpp"
#include "icount/evaluation.hpp"
#include "icount/checkpoint.hpp"
#include "icount/experiment.hpp"
