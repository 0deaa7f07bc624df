#pragma once

#include "posi/config.hpp"
#include "posi/constants.hpp"
#include "posi/core.hpp"
#include "posi/design.hpp"
#include "posi/distributions.hpp"
#include "posi/exact_nested.hpp"
#include "posi/lasso.hpp"
#include "posi/mc_search.hpp"
#include "posi/parallel.hpp"
#include "posi/quadrature.hpp"
#include "posi/random.hpp"
#include "posi/report.hpp"
#include "posi/selectors.hpp"
#include "posi/zero_restriction.hpp"
