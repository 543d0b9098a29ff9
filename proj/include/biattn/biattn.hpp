#pragma once

#include "biattn/backbone.hpp"
#include "biattn/baselines.hpp"
#include "biattn/bi_attention.hpp"
#include "biattn/binary_io.hpp"
#include "biattn/checkpoint.hpp"
#include "biattn/config.hpp"
#include "biattn/dataset.hpp"
#include "biattn/episode.hpp"
#include "biattn/evaluation.hpp"
#include "biattn/grad_check.hpp"
#include "biattn/gradcheck_suite.hpp"
#include "biattn/graph.hpp"
#include "biattn/model.hpp"
#include "biattn/ops.hpp"
#include "biattn/pairing.hpp"
#include "biattn/params.hpp"
#include "biattn/rng.hpp"
#include "biattn/tensor.hpp"
#include "biattn/training.hpp"
