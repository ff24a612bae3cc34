// Copyright (c) 2026 The vpq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "vpq/autograd.hpp"
#include "vpq/checkpoint.hpp"
#include "vpq/config.hpp"
#include "vpq/data.hpp"
#include "vpq/errors.hpp"
#include "vpq/harness.hpp"
#include "vpq/masking.hpp"
#include "vpq/model.hpp"
#include "vpq/optim.hpp"
#include "vpq/params.hpp"
#include "vpq/profiler.hpp"
#include "vpq/rng.hpp"
#include "vpq/tensor.hpp"
#include "vpq/train.hpp"
