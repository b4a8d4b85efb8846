#pragma once

// Minimal reverse-mode differentiable core: dense float64 tensors, a tape of
// op records rebuilt per forward pass, and an AdamW optimizer.

#include "demosel/diffcore/graph.hpp"
#include "demosel/diffcore/ops.hpp"
#include "demosel/diffcore/parameters.hpp"
#include "demosel/diffcore/tensor.hpp"
