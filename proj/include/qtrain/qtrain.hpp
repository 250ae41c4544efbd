#pragma once

#include "qtrain/bits.hpp"
#include "qtrain/calibration.hpp"
#include "qtrain/compiler.hpp"
#include "qtrain/dataset.hpp"
#include "qtrain/error.hpp"
#include "qtrain/graph_io.hpp"
#include "qtrain/graph_ir.hpp"
#include "qtrain/interpreter.hpp"
#include "qtrain/manifest.hpp"
#include "qtrain/pipeline.hpp"
#include "qtrain/qparams.hpp"
#include "qtrain/quantizer.hpp"
#include "qtrain/tensor.hpp"
#include "qtrain/tfhe_sim.hpp"
#include "qtrain/trainer.hpp"
