#pragma once

// Umbrella header.

#include "tgcn/data_io.hpp"
#include "tgcn/dataset.hpp"
#include "tgcn/dense.hpp"
#include "tgcn/error.hpp"
#include "tgcn/experiment.hpp"
#include "tgcn/graph_builders.hpp"
#include "tgcn/metrics.hpp"
#include "tgcn/model.hpp"
#include "tgcn/rng.hpp"
#include "tgcn/sparse.hpp"
#include "tgcn/tensor_graph.hpp"
#include "tgcn/training.hpp"
