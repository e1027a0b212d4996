#pragma once

// Everything except image file I/O and the CLI layer, which pull in OpenCV.

#include "berrypoll/config.hpp"
#include "berrypoll/dataset.hpp"
#include "berrypoll/distributions.hpp"
#include "berrypoll/errors.hpp"
#include "berrypoll/imaging.hpp"
#include "berrypoll/mixedmodel.hpp"
#include "berrypoll/report.hpp"
#include "berrypoll/rng.hpp"
#include "berrypoll/serialize.hpp"
#include "berrypoll/synth.hpp"
