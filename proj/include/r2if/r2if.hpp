#pragma once

// Umbrella header: pulls in the whole library.

#include "r2if/version.hpp"
#include "r2if/errors.hpp"
#include "r2if/canonical.hpp"
#include "r2if/domain.hpp"
#include "r2if/response_parser.hpp"
#include "r2if/match.hpp"
#include "r2if/backends.hpp"
#include "r2if/reward.hpp"
#include "r2if/grpo.hpp"
#include "r2if/toy_trainer.hpp"
#include "r2if/dataset.hpp"
#include "r2if/harness.hpp"
#include "r2if/service.hpp"
#include "r2if/cli.hpp"
