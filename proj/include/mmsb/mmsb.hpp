#pragma once

#include "mmsb/core.hpp"
#include "mmsb/datasets.hpp"
#include "mmsb/imff.hpp"
#include "mmsb/integrate.hpp"
#include "mmsb/metrics.hpp"
#include "mmsb/net.hpp"
#include "mmsb/oracle.hpp"
#include "mmsb/parallel.hpp"
#include "mmsb/reference.hpp"
