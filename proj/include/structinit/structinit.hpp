#pragma once

#include "linalg.hpp"
#include "random.hpp"
#include "conv.hpp"
#include "pseudo_input.hpp"
#include "attention.hpp"
#include "solver.hpp"
#include "prop1.hpp"
#include "bundle_io.hpp"
