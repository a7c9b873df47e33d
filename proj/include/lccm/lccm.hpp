#pragma once

// Umbrella header for the latent-class choice modelling toolkit.

#include "lccm/csv.hpp"
#include "lccm/dataset.hpp"
#include "lccm/efa.hpp"
#include "lccm/estimation.hpp"
#include "lccm/fmnl.hpp"
#include "lccm/kernels.hpp"
#include "lccm/model.hpp"
#include "lccm/optim.hpp"
#include "lccm/posterior.hpp"
#include "lccm/report.hpp"
#include "lccm/stats.hpp"
#include "lccm/synthgen.hpp"
