#pragma once

#include "xkey/error.hpp"
#include "xkey/volume.hpp"
#include "xkey/random.hpp"
#include "xkey/synth.hpp"
#include "xkey/keypoint.hpp"
#include "xkey/detect.hpp"
#include "xkey/saliency.hpp"
#include "xkey/sampler.hpp"
#include "xkey/patch.hpp"
#include "xkey/nn.hpp"
#include "xkey/train.hpp"
#include "xkey/match.hpp"
#include "xkey/register.hpp"
#include "xkey/eval.hpp"
#include "xkey/config.hpp"
#include "xkey/pipeline.hpp"
