#pragma once

#include <gradflow/error.hpp>
#include <gradflow/grid.hpp>
#include <gradflow/harness.hpp>
#include <gradflow/integrator.hpp>
#include <gradflow/linear_solver.hpp>
#include <gradflow/metric.hpp>
#include <gradflow/problem.hpp>
#include <gradflow/problems.hpp>
#include <gradflow/reference.hpp>
#include <gradflow/tableau.hpp>
#include <gradflow/verify.hpp>
