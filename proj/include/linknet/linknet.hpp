#pragma once

#include "linknet/tensor.hpp"
#include "linknet/autodiff.hpp"
#include "linknet/gradcheck.hpp"
#include "linknet/scene.hpp"
#include "linknet/model.hpp"
#include "linknet/train.hpp"
#include "linknet/eval.hpp"
