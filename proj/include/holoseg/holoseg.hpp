#pragma once

#include "holoseg/clustering.hpp"
#include "holoseg/commands.hpp"
#include "holoseg/config.hpp"
#include "holoseg/core.hpp"
#include "holoseg/image_io.hpp"
#include "holoseg/inference.hpp"
#include "holoseg/losses.hpp"
#include "holoseg/metrics.hpp"
#include "holoseg/model.hpp"
#include "holoseg/prototype.hpp"
#include "holoseg/scene.hpp"
#include "holoseg/special_functions.hpp"
#include "holoseg/train.hpp"
#include "holoseg/tuning.hpp"
#include "holoseg/viz.hpp"
