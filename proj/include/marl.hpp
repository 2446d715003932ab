#pragma once

#include "marl/ablate.hpp"
#include "marl/archive.hpp"
#include "marl/checkpoint.hpp"
#include "marl/config.hpp"
#include "marl/data.hpp"
#include "marl/errors.hpp"
#include "marl/evaluate.hpp"
#include "marl/gradcheck.hpp"
#include "marl/grpo.hpp"
#include "marl/likelihood.hpp"
#include "marl/metrics.hpp"
#include "marl/model.hpp"
#include "marl/nn.hpp"
#include "marl/optim.hpp"
#include "marl/plot.hpp"
#include "marl/pretrain.hpp"
#include "marl/reward.hpp"
#include "marl/rng.hpp"
#include "marl/rollout.hpp"
#include "marl/sampler.hpp"
#include "marl/schedule.hpp"
#include "marl/tensor.hpp"
#include "marl/trainer.hpp"
