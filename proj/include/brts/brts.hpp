#pragma once

#include "brts/config.hpp"
#include "brts/evaluator.hpp"
#include "brts/gradcheck.hpp"
#include "brts/losses.hpp"
#include "brts/parallel.hpp"
#include "brts/policy.hpp"
#include "brts/rng.hpp"
#include "brts/rollout.hpp"
#include "brts/selector.hpp"
#include "brts/text.hpp"
#include "brts/trainer.hpp"
#include "brts/vocab_tasks.hpp"
