#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pdial/training.hpp"

namespace pdial {

struct GradcheckOptions {
    double step = 1e-4;
    double tolerance = 1e-3;
    double floor = 1e-8;  // denominators below this count as absolute error
    /// When non-empty, the analytic gradient of this parameter is scaled by 1.5
    /// before comparison (negative control).
    std::string corrupt;
};

struct GradcheckResult {
    std::string name;
    std::size_t entries = 0;
    double max_rel_error = 0.0;
    double analytic_norm = 0.0;
    bool pass = false;
};

/// A small double-precision model, vocabulary and batch drawn from the
/// synthetic corpus; every parameter is jittered off its initial value so that
/// no gradient is trivially zero.
struct GradcheckSetup {
    Vocab vocab;
    Model<double> model;
    std::vector<EncodedExample> batch;
    TrainConfig train;
};

GradcheckSetup tiny_gradcheck_setup(std::uint64_t seed, const ModelConfig* overrides = nullptr);

/// Compares the analytic gradient of total_finetune_loss with central
/// differences for every entry of every parameter.
std::vector<GradcheckResult> gradcheck_finetune(Model<double>& model, const std::vector<EncodedExample>& batch,
                                                const TrainConfig& cfg, const GradcheckOptions& opts = {});

}  // namespace pdial
