#pragma once

#include "pixpro/tensor.hpp"
#include "pixpro/autograd.hpp"
#include "pixpro/ops.hpp"
#include "pixpro/rng.hpp"
#include "pixpro/gradcheck.hpp"
#include "pixpro/image.hpp"
#include "pixpro/viewgen.hpp"
#include "pixpro/encoder.hpp"
#include "pixpro/objectives.hpp"
#include "pixpro/config.hpp"
#include "pixpro/lars.hpp"
#include "pixpro/dataset.hpp"
#include "pixpro/checkpoint.hpp"
#include "pixpro/trainer.hpp"
#include "pixpro/eval.hpp"
#include "pixpro/gradsuite.hpp"
#include "pixpro/cli.hpp"
