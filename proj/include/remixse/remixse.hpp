#pragma once

#include "remixse/adam.hpp"
#include "remixse/autodiff.hpp"
#include "remixse/checkpoint.hpp"
#include "remixse/config.hpp"
#include "remixse/corpus.hpp"
#include "remixse/distill.hpp"
#include "remixse/error.hpp"
#include "remixse/fft.hpp"
#include "remixse/hash.hpp"
#include "remixse/inference.hpp"
#include "remixse/metrics.hpp"
#include "remixse/model.hpp"
#include "remixse/parallel.hpp"
#include "remixse/resample.hpp"
#include "remixse/rng.hpp"
#include "remixse/signal.hpp"
#include "remixse/wav.hpp"
