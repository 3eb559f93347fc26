#pragma once

#include "funcdiff/common.hpp"
#include "funcdiff/grid.hpp"
#include "funcdiff/covariance.hpp"
#include "funcdiff/function_space.hpp"
#include "funcdiff/measures.hpp"
#include "funcdiff/forward_process.hpp"
#include "funcdiff/score_fn.hpp"
#include "funcdiff/score_oracle.hpp"
#include "funcdiff/reverse_sampler.hpp"
#include "funcdiff/conditioning.hpp"
#include "funcdiff/metrics.hpp"
