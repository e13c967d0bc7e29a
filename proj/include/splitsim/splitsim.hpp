#pragma once

#include "splitsim/checkpoint.hpp"
#include "splitsim/config.hpp"
#include "splitsim/data.hpp"
#include "splitsim/experiment.hpp"
#include "splitsim/idx.hpp"
#include "splitsim/metrics.hpp"
#include "splitsim/nn.hpp"
#include "splitsim/oracle.hpp"
#include "splitsim/orchestrator.hpp"
#include "splitsim/report.hpp"
#include "splitsim/split.hpp"
#include "splitsim/strategies.hpp"
#include "splitsim/verify.hpp"
