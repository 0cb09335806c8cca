#pragma once

#include "sgdm/linalg.hpp"
#include "sgdm/problems.hpp"
#include "sgdm/schedule.hpp"
#include "sgdm/optimizers.hpp"
#include "sgdm/diagnostics.hpp"
#include "sgdm/theory.hpp"
#include "sgdm/montecarlo.hpp"
#include "sgdm/harness.hpp"
#include "sgdm/verify.hpp"
