#pragma once

#include "modmeta/annealing.hpp"
#include "modmeta/dataset.hpp"
#include "modmeta/digest.hpp"
#include "modmeta/error.hpp"
#include "modmeta/meta_learn.hpp"
#include "modmeta/module_pool.hpp"
#include "modmeta/nn.hpp"
#include "modmeta/optimizer.hpp"
#include "modmeta/parallel.hpp"
#include "modmeta/rng.hpp"
#include "modmeta/structure.hpp"
#include "modmeta/tasks.hpp"
#include "modmeta/report.hpp"
