#pragma once

#include "sipe/tensor.hpp"
#include "sipe/autodiff.hpp"
#include "sipe/rng.hpp"
#include "sipe/backbone.hpp"
#include "sipe/cam.hpp"
#include "sipe/seed.hpp"
#include "sipe/prototype.hpp"
#include "sipe/train.hpp"
#include "sipe/gradcheck.hpp"
#include "sipe/eval.hpp"
#include "sipe/dataset.hpp"
#include "sipe/ablation.hpp"
#include "sipe/run_config.hpp"
