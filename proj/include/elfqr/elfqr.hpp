#pragma once

#include "elfqr/bandwidth.hpp"
#include "elfqr/basis.hpp"
#include "elfqr/calibrate.hpp"
#include "elfqr/data.hpp"
#include "elfqr/elf.hpp"
#include "elfqr/fit.hpp"
#include "elfqr/model_io.hpp"
#include "elfqr/optim.hpp"
#include "elfqr/parallel.hpp"
#include "elfqr/rng.hpp"
#include "elfqr/simulate.hpp"
#include "elfqr/sinh_arcsinh.hpp"
