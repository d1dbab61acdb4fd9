#pragma once

#include "supe/artifacts.hpp"
#include "supe/bma.hpp"
#include "supe/covariance.hpp"
#include "supe/csv.hpp"
#include "supe/data.hpp"
#include "supe/diagnostics.hpp"
#include "supe/error.hpp"
#include "supe/estimation.hpp"
#include "supe/grouping.hpp"
#include "supe/inference.hpp"
#include "supe/optimize.hpp"
#include "supe/parallel.hpp"
#include "supe/simulate.hpp"
