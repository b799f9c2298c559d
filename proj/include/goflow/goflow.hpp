#pragma once

#include "goflow/check.hpp"
#include "goflow/config.hpp"
#include "goflow/dataset.hpp"
#include "goflow/entropic_ot.hpp"
#include "goflow/errors.hpp"
#include "goflow/flow_paths.hpp"
#include "goflow/io.hpp"
#include "goflow/metrics.hpp"
#include "goflow/molecule.hpp"
#include "goflow/ode_sampler.hpp"
#include "goflow/random.hpp"
#include "goflow/so3.hpp"
#include "goflow/toy_data.hpp"
#include "goflow/training.hpp"
#include "goflow/velocity_net.hpp"
#include "goflow/zmatrix.hpp"
