// Copyright Contributors to the shelltex project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include "shelltex/core/errors.hpp"
#include "shelltex/core/math.hpp"
#include "shelltex/core/parallel.hpp"
#include "shelltex/decoder.hpp"
#include "shelltex/densify.hpp"
#include "shelltex/geometry.hpp"
#include "shelltex/hashfield.hpp"
#include "shelltex/io/checkpoint.hpp"
#include "shelltex/io/dataset.hpp"
#include "shelltex/io/image.hpp"
#include "shelltex/io/mesh.hpp"
#include "shelltex/io/metrics.hpp"
#include "shelltex/io/synthetic.hpp"
#include "shelltex/losses.hpp"
#include "shelltex/optim.hpp"
#include "shelltex/renderer.hpp"
#include "shelltex/sh.hpp"
#include "shelltex/train.hpp"
