#pragma once

// Umbrella include for the whole library.

#include "msv/autodiff.hpp"
#include "msv/blocks.hpp"
#include "msv/eval.hpp"
#include "msv/gradcheck_targets.hpp"
#include "msv/graph.hpp"
#include "msv/ops.hpp"
#include "msv/optim.hpp"
#include "msv/tensor.hpp"
#include "msv/tensor_io.hpp"
#include "msv/train.hpp"
#include "msv/weights_io.hpp"
