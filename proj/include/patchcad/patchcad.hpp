#pragma once

#include "patchcad/config.hpp"
#include "patchcad/descriptor.hpp"
#include "patchcad/embed.hpp"
#include "patchcad/error.hpp"
#include "patchcad/eval.hpp"
#include "patchcad/gradcheck.hpp"
#include "patchcad/index.hpp"
#include "patchcad/mesh.hpp"
#include "patchcad/model_io.hpp"
#include "patchcad/pipeline.hpp"
#include "patchcad/pose.hpp"
#include "patchcad/random.hpp"
#include "patchcad/render.hpp"
#include "patchcad/synth.hpp"
#include "patchcad/views.hpp"
