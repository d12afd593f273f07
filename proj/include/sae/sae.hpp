#ifndef SAE_SAE_HPP
#define SAE_SAE_HPP

#include "sae/commands.hpp"
#include "sae/diagnostics.hpp"
#include "sae/error.hpp"
#include "sae/io.hpp"
#include "sae/kdtree.hpp"
#include "sae/model.hpp"
#include "sae/predict.hpp"
#include "sae/random.hpp"
#include "sae/sampler.hpp"
#include "sae/selection.hpp"
#include "sae/simulate.hpp"
#include "sae/spatial_core.hpp"
#include "sae/survey.hpp"

#endif  // SAE_SAE_HPP
