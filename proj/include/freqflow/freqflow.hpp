#pragma once

#include "freqflow/core.hpp"
#include "freqflow/spectral.hpp"
#include "freqflow/flowpath.hpp"
#include "freqflow/autodiff.hpp"
#include "freqflow/model.hpp"
#include "freqflow/training.hpp"
#include "freqflow/sampling.hpp"
#include "freqflow/analysis.hpp"
#include "freqflow/data.hpp"
#include "freqflow/config.hpp"
#include "freqflow/selfcheck.hpp"
