#pragma once

// Umbrella header for the normalized-convolution upsampler library.

#include "ncup/autograd.hpp"
#include "ncup/flowio.hpp"
#include "ncup/nconv.hpp"
#include "ncup/ops.hpp"
#include "ncup/sparsify.hpp"
#include "ncup/tensor.hpp"
#include "ncup/train.hpp"
#include "ncup/upsampler.hpp"
