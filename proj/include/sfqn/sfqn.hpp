#pragma once

#include "sfqn/tensor.hpp"
#include "sfqn/autodiff.hpp"
#include "sfqn/grad_check.hpp"
#include "sfqn/checkpoint.hpp"
#include "sfqn/params.hpp"
#include "sfqn/fuzzy_codec.hpp"
#include "sfqn/snn.hpp"
#include "sfqn/qnet.hpp"
#include "sfqn/analysis.hpp"
#include "sfqn/highway.hpp"
#include "sfqn/dqn.hpp"
#include "sfqn/config.hpp"
#include "sfqn/experiment.hpp"
