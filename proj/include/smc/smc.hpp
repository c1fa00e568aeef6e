#pragma once

#include "smc/tensor.hpp"
#include "smc/autodiff.hpp"
#include "smc/optim.hpp"
#include "smc/gradcheck.hpp"
#include "smc/rng.hpp"
#include "smc/binary_io.hpp"
#include "smc/dataset.hpp"
#include "smc/mixer.hpp"
#include "smc/pairloss.hpp"
#include "smc/model.hpp"
#include "smc/config.hpp"
#include "smc/trainer.hpp"
#include "smc/analysis.hpp"
#include "smc/verify.hpp"
