#pragma once

#include "granular/analytic.hpp"
#include "granular/cmetrics.hpp"
#include "granular/crplus.hpp"
#include "granular/eval.hpp"
#include "granular/mlp.hpp"
#include "granular/parallel.hpp"
#include "granular/portfolio.hpp"
#include "granular/random.hpp"
#include "granular/rootfind.hpp"
#include "granular/sampler.hpp"
#include "granular/special.hpp"
#include "granular/train.hpp"
#include "granular/yield_curve.hpp"
