#pragma once

#include "moase/adam.hpp"
#include "moase/adapter.hpp"
#include "moase/analysis.hpp"
#include "moase/augment.hpp"
#include "moase/backbone.hpp"
#include "moase/checkpoint.hpp"
#include "moase/config.hpp"
#include "moase/ctta.hpp"
#include "moase/domains.hpp"
#include "moase/error.hpp"
#include "moase/experiment.hpp"
#include "moase/gradcheck.hpp"
#include "moase/graph.hpp"
#include "moase/report.hpp"
#include "moase/rng.hpp"
#include "moase/sdd.hpp"
#include "moase/tensor.hpp"
