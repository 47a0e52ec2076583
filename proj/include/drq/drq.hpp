#pragma once

#include "drq/error.hpp"
#include "drq/random.hpp"
#include "drq/tensor.hpp"
#include "drq/quantizer.hpp"
#include "drq/layers.hpp"
#include "drq/network.hpp"
#include "drq/optim.hpp"
#include "drq/dataset.hpp"
#include "drq/training.hpp"
#include "drq/multiprec.hpp"
#include "drq/sensitivity.hpp"
#include "drq/mixedprec.hpp"
#include "drq/search.hpp"
#include "drq/checkpoint.hpp"
#include "drq/report.hpp"
#include "drq/config.hpp"
#include "drq/pipeline.hpp"
