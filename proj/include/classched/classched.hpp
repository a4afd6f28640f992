// Copyright (c) 2026 The classched Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "classched/diffcore/ops.hpp"
#include "classched/diffcore/param_set.hpp"
#include "classched/diffcore/tensor.hpp"
#include "classched/harness/config.hpp"
#include "classched/harness/metrics.hpp"
#include "classched/harness/suite.hpp"
#include "classched/harness/trainer.hpp"
#include "classched/policy.hpp"
#include "classched/reward.hpp"
#include "classched/rng.hpp"
#include "classched/segenv.hpp"
#include "classched/skfen.hpp"
#include "classched/statecodec.hpp"
#include "classched/types.hpp"
