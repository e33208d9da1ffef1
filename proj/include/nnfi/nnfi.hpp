#pragma once

#include "nnfi/config.hpp"
#include "nnfi/error.hpp"
#include "nnfi/experiment.hpp"
#include "nnfi/fault.hpp"
#include "nnfi/graph.hpp"
#include "nnfi/model_io.hpp"
#include "nnfi/observe.hpp"
#include "nnfi/quant.hpp"
#include "nnfi/rng.hpp"
#include "nnfi/tensor.hpp"
#include "nnfi/text.hpp"
