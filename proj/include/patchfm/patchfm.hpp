#pragma once

#include "patchfm/checkpoint.hpp"
#include "patchfm/config.hpp"
#include "patchfm/cpm.hpp"
#include "patchfm/eval.hpp"
#include "patchfm/forecast.hpp"
#include "patchfm/harness.hpp"
#include "patchfm/input.hpp"
#include "patchfm/model.hpp"
#include "patchfm/optim.hpp"
#include "patchfm/quantile.hpp"
#include "patchfm/synth.hpp"
#include "patchfm/tensor/array.hpp"
#include "patchfm/tensor/gradcheck.hpp"
#include "patchfm/tensor/graph.hpp"
#include "patchfm/train.hpp"
#include "patchfm/ump.hpp"
