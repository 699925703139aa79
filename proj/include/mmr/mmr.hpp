#pragma once

#include "mmr/analysis.hpp"
#include "mmr/attention.hpp"
#include "mmr/checkpoint.hpp"
#include "mmr/config.hpp"
#include "mmr/model.hpp"
#include "mmr/moe.hpp"
#include "mmr/rope.hpp"
#include "mmr/tensor.hpp"
#include "mmr/trainer.hpp"
