#pragma once

#include "attention_model.hpp"
#include "data_model.hpp"
#include "errors.hpp"
#include "experiments.hpp"
#include "json_io.hpp"
#include "linalg.hpp"
#include "multiclass.hpp"
#include "parallel.hpp"
#include "random.hpp"
#include "reduced_gd.hpp"
#include "theory.hpp"
#include "trainer.hpp"
