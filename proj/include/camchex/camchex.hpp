// Umbrella header.
#pragma once

#include "camchex/arch.hpp"
#include "camchex/checkpoint.hpp"
#include "camchex/data_model.hpp"
#include "camchex/encoders.hpp"
#include "camchex/fusion.hpp"
#include "camchex/head_loss.hpp"
#include "camchex/metrics.hpp"
#include "camchex/model.hpp"
#include "camchex/nn.hpp"
#include "camchex/ops.hpp"
#include "camchex/synthetic.hpp"
#include "camchex/tensor.hpp"
#include "camchex/training.hpp"
