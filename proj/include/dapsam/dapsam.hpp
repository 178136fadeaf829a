#pragma once

#include "dapsam/adapter.hpp"
#include "dapsam/checkpoint.hpp"
#include "dapsam/config.hpp"
#include "dapsam/decoder.hpp"
#include "dapsam/encoder.hpp"
#include "dapsam/errors.hpp"
#include "dapsam/gradcheck.hpp"
#include "dapsam/layers.hpp"
#include "dapsam/losses.hpp"
#include "dapsam/model.hpp"
#include "dapsam/optim.hpp"
#include "dapsam/params.hpp"
#include "dapsam/prompt.hpp"
#include "dapsam/rng.hpp"
#include "dapsam/synthetic.hpp"
#include "dapsam/tensor.hpp"
#include "dapsam/train.hpp"
#include "dapsam/zip.hpp"
