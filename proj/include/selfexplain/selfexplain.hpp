#pragma once

// Umbrella header: the whole library.

#include "selfexplain/backend.hpp"
#include "selfexplain/corpus.hpp"
#include "selfexplain/error.hpp"
#include "selfexplain/experiment.hpp"
#include "selfexplain/hash.hpp"
#include "selfexplain/jsonl.hpp"
#include "selfexplain/metrics.hpp"
#include "selfexplain/pipeline.hpp"
#include "selfexplain/prompting.hpp"
#include "selfexplain/rng.hpp"
