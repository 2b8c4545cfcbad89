#pragma once

#include "featcov/error.hpp"
#include "featcov/binary_io.hpp"
#include "featcov/model.hpp"
#include "featcov/model_io.hpp"
#include "featcov/feature.hpp"
#include "featcov/discretise.hpp"
#include "featcov/bn.hpp"
#include "featcov/coverage.hpp"
#include "featcov/abstraction.hpp"
#include "featcov/lp.hpp"
#include "featcov/encoding.hpp"
#include "featcov/concolic.hpp"
