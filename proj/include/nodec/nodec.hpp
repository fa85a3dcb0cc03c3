#pragma once

#include "nodec/autodiff.hpp"
#include "nodec/controllers.hpp"
#include "nodec/dynamics.hpp"
#include "nodec/graph.hpp"
#include "nodec/metrics.hpp"
#include "nodec/odesolve.hpp"
#include "nodec/random.hpp"
#include "nodec/training.hpp"
