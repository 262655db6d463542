#pragma once

// Library umbrella. The command-line layer lives in ipwd/cli.hpp and is not
// included here so library users do not pull in CLI11.

#include "ipwd/checkpoint.hpp"
#include "ipwd/config.hpp"
#include "ipwd/data.hpp"
#include "ipwd/errors.hpp"
#include "ipwd/losses.hpp"
#include "ipwd/mathcore.hpp"
#include "ipwd/metrics.hpp"
#include "ipwd/net.hpp"
#include "ipwd/report.hpp"
#include "ipwd/rng.hpp"
#include "ipwd/run.hpp"
#include "ipwd/trainer.hpp"
#include "ipwd/weighting.hpp"
