#pragma once

#include "tickgp/core/autodiff.hpp"
#include "tickgp/core/errors.hpp"
#include "tickgp/core/linalg.hpp"
#include "tickgp/core/ops.hpp"
#include "tickgp/core/parameters.hpp"
#include "tickgp/core/tensor.hpp"
#include "tickgp/data/data.hpp"
#include "tickgp/inducing/inducing.hpp"
#include "tickgp/kernels/convolutional.hpp"
#include "tickgp/kernels/crossings.hpp"
#include "tickgp/kernels/patches.hpp"
#include "tickgp/kernels/stationary.hpp"
#include "tickgp/likelihoods/likelihoods.hpp"
#include "tickgp/metrics/metrics.hpp"
#include "tickgp/model/checkpoint.hpp"
#include "tickgp/model/deep_model.hpp"
#include "tickgp/svgp/layer.hpp"
#include "tickgp/training/init.hpp"
#include "tickgp/training/optimizer.hpp"
#include "tickgp/training/train.hpp"
