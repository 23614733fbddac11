#pragma once

#include "perft/errors.hpp"
#include "perft/matrix.hpp"
#include "perft/pmat.hpp"
#include "perft/autograd.hpp"
#include "perft/parameter.hpp"
#include "perft/grad_check.hpp"
#include "perft/moe.hpp"
#include "perft/adapters.hpp"
#include "perft/strategies.hpp"
#include "perft/model.hpp"
#include "perft/routing_stats.hpp"
#include "perft/training.hpp"
#include "perft/analysis.hpp"
#include "perft/config.hpp"
#include "perft/checkpoint.hpp"
