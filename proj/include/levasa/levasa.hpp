#pragma once

#include "levasa/error.hpp"
#include "levasa/rng.hpp"
#include "levasa/tensor.hpp"
#include "levasa/diffcore.hpp"
#include "levasa/gradcheck.hpp"
#include "levasa/csv.hpp"
#include "levasa/circumplex.hpp"
#include "levasa/synthface.hpp"
#include "levasa/vae.hpp"
#include "levasa/train.hpp"
#include "levasa/evalkit.hpp"
