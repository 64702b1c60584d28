#pragma once

#include "fedimt/matrix.hpp"
#include "fedimt/rng.hpp"
#include "fedimt/nn.hpp"
#include "fedimt/data.hpp"
#include "fedimt/idx.hpp"
#include "fedimt/estimator.hpp"
#include "fedimt/observer.hpp"
#include "fedimt/metrics.hpp"
#include "fedimt/fl.hpp"
#include "fedimt/config.hpp"
#include "fedimt/report_io.hpp"
