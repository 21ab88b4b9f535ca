#pragma once

#include "sivqr/bandwidth.hpp"
#include "sivqr/core_model.hpp"
#include "sivqr/error.hpp"
#include "sivqr/estimator.hpp"
#include "sivqr/inference.hpp"
#include "sivqr/normal.hpp"
#include "sivqr/parallel.hpp"
#include "sivqr/projection.hpp"
#include "sivqr/see_solver.hpp"
#include "sivqr/simulation.hpp"
#include "sivqr/smoothing.hpp"
