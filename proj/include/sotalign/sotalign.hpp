#ifndef SOTALIGN_SOTALIGN_HPP
#define SOTALIGN_SOTALIGN_HPP

#include "sotalign/divergences.hpp"
#include "sotalign/embeddings.hpp"
#include "sotalign/entropic_ot.hpp"
#include "sotalign/errors.hpp"
#include "sotalign/eval.hpp"
#include "sotalign/linear_teachers.hpp"
#include "sotalign/optim.hpp"
#include "sotalign/rng.hpp"
#include "sotalign/semb.hpp"
#include "sotalign/shift_metrics.hpp"
#include "sotalign/synth.hpp"
#include "sotalign/trainer.hpp"

#endif  // SOTALIGN_SOTALIGN_HPP
