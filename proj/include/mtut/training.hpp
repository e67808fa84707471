#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtut/alignment.hpp"
#include "mtut/data.hpp"
#include "mtut/network.hpp"

namespace mtut {

enum class TrainMode { Mtut, Baseline };
enum class TrainPhase { Pretrain, Ssa };

struct TrainConfig {
    double lambda = 0.05;
    double beta = 2.0;
    int pretrainEpochs = 30;
    int ssaEpochs = 15;
    double baseLr = 1e-2;
    double momentum = 0.9;
    int batchSize = 8;
    std::uint64_t seed = 1;
    TrainMode mode = TrainMode::Mtut;
    int plateauPatience = 5;
    double plateauDelta = 1e-3;
    int maxLrDrops = 2;
    // Modalities to train on; empty means every modality in the manifest.
    std::vector<std::string> modalities;

    int totalEpochs() const { return pretrainEpochs + ssaEpochs; }
    void validate() const;
};

struct PlateauTracker {
    double best = std::numeric_limits<double>::infinity();
    int sinceImprove = 0;
};

struct OptimizerState {
    std::vector<Gradients> velocity;  // one per network, shapes mirror params
    double lr = 1e-2;
    int lrDrops = 0;
    PlateauTracker plateau;
};

// v <- mu * v + g; p <- p - lr * v, elementwise per parameter tensor.
void sgd_momentum_step(ModalityNetwork& net, const Gradients& grads, Gradients& velocity,
                       double lr, double mu);

// One 10x drop (up to maxLrDrops) after plateauPatience consecutive epochs
// without an improvement greater than plateauDelta; the tracker resets on
// each drop.
void lr_schedule_update(OptimizerState& state, double epochTrainLoss, int plateauPatience,
                        double plateauDelta, int maxLrDrops);

struct StepStats {
    std::vector<LossBreakdown> perNetwork;  // indexed like the network list
    // gates[m][n] for ordered pairs, untouched (rho 0) outside ssa phase.
    std::vector<std::vector<FocalGate>> gates;
    bool oneWayViolation = false;
};

// One synchronous co-training step over a batch: every gradient is
// computed against pre-step parameters, then each network takes one SGD
// step. Gates come from the batch-mean classification losses; SSA targets
// are stop-gradient.
StepStats cotrain_step(std::vector<ModalityNetwork>& networks,
                       const std::vector<const GestureClip*>& batch, const TrainConfig& cfg,
                       TrainPhase phase, OptimizerState& state);

struct EpochMetrics {
    int epoch = 0;  // 1-based
    std::string phase;
    double lr = 0.0;
    std::map<std::string, double> clsLoss;    // per modality
    std::map<std::string, double> totalLoss;  // per modality
    // rhoMean[m][n], ssaMean[m][n]: epoch means over steps (ssa phase only).
    std::map<std::string, std::map<std::string, double>> rhoMean;
    std::map<std::string, std::map<std::string, double>> ssaMean;
};

struct TrainResult {
    std::vector<std::string> modalities;
    std::vector<EpochMetrics> epochs;
    std::vector<StepStats> steps;  // in step order, for invariant checks
    long long oneWayViolations = 0;
};

// Runs pretrainEpochs classification-only epochs followed by ssaEpochs of
// co-training (baseline mode keeps SSA off for the same total budget).
// Writes metrics.jsonl, config.json, checkpoint_pretrain/ and
// checkpoint_final/ under outDir.
TrainResult train(const TrainConfig& cfg, const std::filesystem::path& datasetDir,
                  const std::filesystem::path& outDir,
                  const std::optional<nlohmann::json>& configEcho = std::nullopt);

struct Checkpoint {
    std::vector<ModalityNetwork> networks;
    OptimizerState state;
    int epoch = 0;  // epochs completed when saved
    nlohmann::json configEcho;
};

void save_checkpoint(const std::vector<ModalityNetwork>& networks, const OptimizerState& state,
                     int epoch, const nlohmann::json& configEcho,
                     const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// Continues a checkpointed run against the same dataset and config;
// step-for-step identical to the unbroken run.
TrainResult train_resume(const TrainConfig& cfg, const std::filesystem::path& datasetDir,
                         const std::filesystem::path& outDir,
                         const std::filesystem::path& checkpointDir);

}  // namespace mtut
