#pragma once

#include "flatnce/matrix.hpp"
#include "flatnce/autodiff.hpp"
#include "flatnce/rng.hpp"
#include "flatnce/data.hpp"
#include "flatnce/critics.hpp"
#include "flatnce/estimators.hpp"
#include "flatnce/diagnostics.hpp"
#include "flatnce/optim.hpp"
#include "flatnce/trainer.hpp"
