#pragma once

#include "flowgrad/core.hpp"
#include "flowgrad/velocity.hpp"
#include "flowgrad/mlp.hpp"
#include "flowgrad/sampler.hpp"
#include "flowgrad/quantities.hpp"
#include "flowgrad/adjoint.hpp"
#include "flowgrad/consistency.hpp"
#include "flowgrad/interpolation.hpp"
#include "flowgrad/training.hpp"
#include "flowgrad/oracle.hpp"
#include "flowgrad/io.hpp"
