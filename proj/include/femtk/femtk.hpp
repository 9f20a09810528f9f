#pragma once

#include "femtk/core.hpp"
#include "femtk/evaluation.hpp"
#include "femtk/freeenergy.hpp"
#include "femtk/msm.hpp"
#include "femtk/potential.hpp"
#include "femtk/random.hpp"
#include "femtk/sampler.hpp"
#include "femtk/tica.hpp"
#include "femtk/training.hpp"
#include "femtk/trajectory.hpp"
