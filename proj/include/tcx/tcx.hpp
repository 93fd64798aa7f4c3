#pragma once

#include "tcx/core.hpp"
#include "tcx/data.hpp"
#include "tcx/ebm.hpp"
#include "tcx/estimators.hpp"
#include "tcx/experiments.hpp"
#include "tcx/gating.hpp"
#include "tcx/manifest.hpp"
#include "tcx/nn.hpp"
#include "tcx/report.hpp"
