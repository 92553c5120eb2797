#pragma once

#include "vmx/cgm.hpp"
#include "vmx/checkpoint.hpp"
#include "vmx/config.hpp"
#include "vmx/data.hpp"
#include "vmx/dataset_io.hpp"
#include "vmx/errors.hpp"
#include "vmx/gradcheck.hpp"
#include "vmx/layers.hpp"
#include "vmx/mask.hpp"
#include "vmx/metrics.hpp"
#include "vmx/network.hpp"
#include "vmx/ops.hpp"
#include "vmx/optim.hpp"
#include "vmx/rng.hpp"
#include "vmx/sscan.hpp"
#include "vmx/tensor.hpp"
#include "vmx/train.hpp"
