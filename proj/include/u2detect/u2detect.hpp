#pragma once

#include "u2detect/error.hpp"
#include "u2detect/fp_env.hpp"
#include "u2detect/core_model.hpp"
#include "u2detect/dih_rnn.hpp"
#include "u2detect/stl.hpp"
#include "u2detect/conformance.hpp"
#include "u2detect/bergman.hpp"
#include "u2detect/io.hpp"
#include "u2detect/manifest.hpp"
