#pragma once

#include "audiotf/analysis.hpp"
#include "audiotf/audio.hpp"
#include "audiotf/common.hpp"
#include "audiotf/model.hpp"
#include "audiotf/nn.hpp"
#include "audiotf/tensor.hpp"
#include "audiotf/train.hpp"
