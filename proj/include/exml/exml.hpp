// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "exml/augment.hpp"
#include "exml/baselines.hpp"
#include "exml/buffer.hpp"
#include "exml/dataset.hpp"
#include "exml/distiller.hpp"
#include "exml/errors.hpp"
#include "exml/generators.hpp"
#include "exml/losses.hpp"
#include "exml/model.hpp"
#include "exml/model_zoo.hpp"
#include "exml/scenario.hpp"
#include "exml/stream.hpp"
#include "exml/tensor.hpp"
