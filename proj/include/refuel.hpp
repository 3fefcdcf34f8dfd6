#pragma once

#include "refuel/error.hpp"
#include "refuel/rng.hpp"
#include "refuel/tables.hpp"
#include "refuel/mdp.hpp"
#include "refuel/envgen.hpp"
#include "refuel/linalg.hpp"
#include "refuel/upstream.hpp"
#include "refuel/offline.hpp"
#include "refuel/online.hpp"
#include "refuel/report.hpp"
#include "refuel/eval.hpp"
#include "refuel/serialize.hpp"
