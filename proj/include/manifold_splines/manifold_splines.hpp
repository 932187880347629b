#pragma once

#include "data.hpp"
#include "design.hpp"
#include "error.hpp"
#include "fem.hpp"
#include "gmrf.hpp"
#include "io.hpp"
#include "likelihood.hpp"
#include "mesh.hpp"
#include "nelder_mead.hpp"
#include "parallel.hpp"
#include "pipeline.hpp"
#include "solver.hpp"
#include "sphere_ref.hpp"
