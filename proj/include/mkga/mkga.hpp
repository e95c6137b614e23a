#pragma once

#include "mkga/adapters.hpp"
#include "mkga/checkpoint.hpp"
#include "mkga/config.hpp"
#include "mkga/data.hpp"
#include "mkga/errors.hpp"
#include "mkga/gradcheck.hpp"
#include "mkga/gradcheck_suite.hpp"
#include "mkga/losses.hpp"
#include "mkga/module.hpp"
#include "mkga/network.hpp"
#include "mkga/ops.hpp"
#include "mkga/optim.hpp"
#include "mkga/rng.hpp"
#include "mkga/stats.hpp"
#include "mkga/tensor.hpp"
#include "mkga/train.hpp"
