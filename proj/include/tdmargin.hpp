#pragma once

#include "tdmargin/error.hpp"
#include "tdmargin/zipload.hpp"
#include "tdmargin/netmodel.hpp"
#include "tdmargin/tpf.hpp"
#include "tdmargin/dpf.hpp"
#include "tdmargin/cosim.hpp"
#include "tdmargin/margin.hpp"
#include "tdmargin/cvr.hpp"
#include "tdmargin/io.hpp"
