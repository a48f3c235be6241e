#pragma once

#include "gbs/baselines.hpp"
#include "gbs/direct.hpp"
#include "gbs/error.hpp"
#include "gbs/estimator.hpp"
#include "gbs/iterative.hpp"
#include "gbs/model.hpp"
#include "gbs/rng.hpp"
