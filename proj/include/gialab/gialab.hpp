#pragma once

// Everything in one include.

#include "gialab/tensor.hpp"
#include "gialab/autodiff.hpp"
#include "gialab/optim.hpp"
#include "gialab/model.hpp"
#include "gialab/serialize.hpp"
#include "gialab/data.hpp"
#include "gialab/fl.hpp"
#include "gialab/metrics.hpp"
#include "gialab/attack_opt.hpp"
#include "gialab/attack_gen.hpp"
#include "gialab/attack_ana.hpp"
#include "gialab/defense.hpp"
#include "gialab/image_io.hpp"
#include "gialab/config.hpp"
#include "gialab/runner.hpp"
#include "gialab/gradcheck.hpp"
#include "gialab/bench.hpp"
