#pragma once

// Umbrella header for the source-tracing toolkit.

#include "srctrace/batching.hpp"
#include "srctrace/embedding.hpp"
#include "srctrace/errors.hpp"
#include "srctrace/eval.hpp"
#include "srctrace/losses.hpp"
#include "srctrace/matrix.hpp"
#include "srctrace/network.hpp"
#include "srctrace/rng.hpp"
#include "srctrace/synthgen.hpp"
#include "srctrace/trainer.hpp"
