#include "mtut/training.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <utility>

#include "mtut/tensor_io.hpp"

namespace mtut {

namespace {

using nlohmann::json;

Gradients zero_like_params(const ModalityNetwork& net) {
    Gradients g;
    g.perLayer.resize(net.params.size());
    for (std::size_t i = 0; i < net.params.size(); ++i) {
        if (net.params[i].weight.size() > 0) {
            g.perLayer[i].weight = Tensor(net.params[i].weight.dims());
            g.perLayer[i].bias = Tensor(net.params[i].bias.dims());
        }
    }
    return g;
}

void add_grads(Gradients& dst, const Gradients& src) {
    for (std::size_t i = 0; i < dst.perLayer.size(); ++i) {
        if (dst.perLayer[i].weight.size() == 0) continue;
        double* w = dst.perLayer[i].weight.data();
        const double* sw = src.perLayer[i].weight.data();
        for (std::size_t j = 0; j < dst.perLayer[i].weight.size(); ++j) w[j] += sw[j];
        double* b = dst.perLayer[i].bias.data();
        const double* sb = src.perLayer[i].bias.data();
        for (std::size_t j = 0; j < dst.perLayer[i].bias.size(); ++j) b[j] += sb[j];
    }
}

void axpy_tensor(Tensor& p, const Tensor& v, double alpha) {
    double* pd = p.data();
    const double* vd = v.data();
    for (std::size_t i = 0; i < p.size(); ++i) pd[i] += alpha * vd[i];
}

}  // namespace

void TrainConfig::validate() const {
    if (lambda < 0.0) throw ValidationError("config: lambda must be >= 0");
    if (beta <= 0.0) throw ValidationError("config: beta must be positive");
    if (baseLr <= 0.0) throw ValidationError("config: baseLr must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ValidationError("config: momentum in [0,1)");
    if (batchSize <= 0) throw ValidationError("config: batchSize must be positive");
    if (pretrainEpochs < 0 || ssaEpochs < 0 || totalEpochs() == 0) {
        throw ValidationError("config: epoch counts must be non-negative and total positive");
    }
    if (plateauPatience <= 0) throw ValidationError("config: plateauPatience must be positive");
    if (plateauDelta < 0.0) throw ValidationError("config: plateauDelta must be >= 0");
    if (maxLrDrops < 0) throw ValidationError("config: maxLrDrops must be >= 0");
}

void sgd_momentum_step(ModalityNetwork& net, const Gradients& grads, Gradients& velocity,
                       double lr, double mu) {
    if (grads.perLayer.size() != net.params.size() ||
        velocity.perLayer.size() != net.params.size()) {
        throw ValidationError("sgd: gradient/velocity layer count mismatch");
    }
    for (std::size_t i = 0; i < net.params.size(); ++i) {
        LayerParams& p = net.params[i];
        if (p.weight.size() == 0) continue;
        const LayerParams& g = grads.perLayer[i];
        LayerParams& v = velocity.perLayer[i];
        if (!g.weight.sameDims(p.weight) || !v.weight.sameDims(p.weight)) {
            throw ValidationError("sgd: shape mismatch");
        }
        double* vw = v.weight.data();
        const double* gw = g.weight.data();
        for (std::size_t j = 0; j < p.weight.size(); ++j) vw[j] = mu * vw[j] + gw[j];
        axpy_tensor(p.weight, v.weight, -lr);
        double* vb = v.bias.data();
        const double* gb = g.bias.data();
        for (std::size_t j = 0; j < p.bias.size(); ++j) vb[j] = mu * vb[j] + gb[j];
        axpy_tensor(p.bias, v.bias, -lr);
    }
}

void lr_schedule_update(OptimizerState& state, double epochTrainLoss, int plateauPatience,
                        double plateauDelta, int maxLrDrops) {
    PlateauTracker& t = state.plateau;
    if (epochTrainLoss < t.best - plateauDelta) {
        t.best = epochTrainLoss;
        t.sinceImprove = 0;
        return;
    }
    ++t.sinceImprove;
    if (t.sinceImprove >= plateauPatience && state.lrDrops < maxLrDrops) {
        state.lr /= 10.0;
        ++state.lrDrops;
        t.sinceImprove = 0;
        t.best = epochTrainLoss;
    }
}

StepStats cotrain_step(std::vector<ModalityNetwork>& networks,
                       const std::vector<const GestureClip*>& batch, const TrainConfig& cfg,
                       TrainPhase phase, OptimizerState& state) {
    const std::size_t M = networks.size();
    const std::size_t B = batch.size();
    if (M == 0 || B == 0) {
        throw ValidationError("cotrain_step: empty networks or batch");
    }

    for (const GestureClip* clip : batch) {
        for (const ModalityNetwork& net : networks) {
            if (clip->modalities.find(net.modalityId) == clip->modalities.end()) {
                throw ValidationError("cotrain_step: clip " + clip->id + " lacks modality " +
                                      net.modalityId);
            }
        }
    }

    struct Unit {
        ForwardResult fwd;
        double clsLoss = 0.0;
        Tensor dLogits;
        Tensor dAlign;  // unscaled sum over source networks, empty if unused
    };
    std::vector<Unit> units(M * B);

    // Exceptions may not cross an OpenMP region; the first one is kept and
    // rethrown afterwards.
    std::exception_ptr pendingError = nullptr;

    // (1) Forward + per-sample classification loss, parallel per unit.
#pragma omp parallel for schedule(dynamic, 1)
    for (std::ptrdiff_t us = 0; us < static_cast<std::ptrdiff_t>(M * B); ++us) {
        try {
            const std::size_t u = static_cast<std::size_t>(us);
            const std::size_t m = u / B;
            const std::size_t s = u % B;
            const GestureClip& clip = *batch[s];
            Unit& unit = units[u];
            unit.fwd = network_forward(networks[m], clip.modalities.at(networks[m].modalityId));
            XentResult xent = softmax_xent(unit.fwd.logits, clip.label);
            unit.clsLoss = xent.loss;
            unit.dLogits = std::move(xent.dLogits);
        } catch (...) {
#pragma omp critical(mtut_step_error)
            if (!pendingError) pendingError = std::current_exception();
        }
    }
    if (pendingError) std::rethrow_exception(pendingError);

    // (2) Batch-mean classification losses, fixed sample order.
    std::vector<double> clsMean(M, 0.0);
    for (std::size_t m = 0; m < M; ++m) {
        for (std::size_t s = 0; s < B; ++s) clsMean[m] += units[m * B + s].clsLoss;
        clsMean[m] /= static_cast<double>(B);
    }

    StepStats stats;
    stats.gates.assign(M, std::vector<FocalGate>(M));
    std::vector<std::vector<double>> ssaMean(M, std::vector<double>(M, 0.0));

    const bool ssaActive = phase == TrainPhase::Ssa && cfg.mode == TrainMode::Mtut &&
                           cfg.lambda > 0.0 && M > 1;
    if (ssaActive) {
        for (std::size_t m = 0; m < M; ++m) {
            for (std::size_t n = 0; n < M; ++n) {
                if (n == m) continue;  // self-pair stays gated to zero
                stats.gates[m][n] = focal_rho(clsMean[m], clsMean[n], cfg.beta);
            }
        }
        std::vector<double> perSample(B);
        for (std::size_t m = 0; m < M; ++m) {
            for (std::size_t n = 0; n < M; ++n) {
                if (n == m || stats.gates[m][n].rho == 0.0) continue;
                const FocalGate& gate = stats.gates[m][n];
#pragma omp parallel for schedule(dynamic, 1)
                for (std::ptrdiff_t ss = 0; ss < static_cast<std::ptrdiff_t>(B); ++ss) {
                    try {
                        const std::size_t s = static_cast<std::size_t>(ss);
                        Unit& unit = units[m * B + s];
                        const FeatureMap fm(unit.fwd.alignOutput(networks[m]));
                        const FeatureMap fn(units[n * B + s].fwd.alignOutput(networks[n]));
                        const SsaEval eval = ssa_loss_with_grad(fm, fn, gate);
                        perSample[s] = eval.value;
                        if (unit.dAlign.size() == 0) {
                            unit.dAlign = eval.grad;
                        } else {
                            axpy_tensor(unit.dAlign, eval.grad, 1.0);
                        }
                    } catch (...) {
#pragma omp critical(mtut_step_error)
                        if (!pendingError) pendingError = std::current_exception();
                    }
                }
                if (pendingError) std::rethrow_exception(pendingError);
                double sum = 0.0;
                for (std::size_t s = 0; s < B; ++s) sum += perSample[s];
                ssaMean[m][n] = sum / static_cast<double>(B);
            }
        }
    }

    // (3) Backward per unit against pre-step parameters.
    const double invB = 1.0 / static_cast<double>(B);
    std::vector<Gradients> unitGrads(M * B);
#pragma omp parallel for schedule(dynamic, 1)
    for (std::ptrdiff_t us = 0; us < static_cast<std::ptrdiff_t>(M * B); ++us) {
        const std::size_t u = static_cast<std::size_t>(us);
        Unit& unit = units[u];
        Tensor dLogits = elementwise_map(unit.dLogits, MapFn::MulScalar, invB);
        const Tensor* dAlign = nullptr;
        Tensor dAlignScaled;
        if (unit.dAlign.size() > 0) {
            dAlignScaled = elementwise_map(unit.dAlign, MapFn::MulScalar, cfg.lambda * invB);
            dAlign = &dAlignScaled;
        }
        unitGrads[u] = network_backward(networks[u / B], unit.fwd.cache, dLogits, dAlign);
    }

    // (4) Fixed-order reduction, then one synchronous SGD step per network.
    for (std::size_t m = 0; m < M; ++m) {
        Gradients stepGrad = zero_like_params(networks[m]);
        for (std::size_t s = 0; s < B; ++s) add_grads(stepGrad, unitGrads[m * B + s]);
        sgd_momentum_step(networks[m], stepGrad, state.velocity[m], state.lr, cfg.momentum);
    }

    stats.perNetwork.resize(M);
    for (std::size_t m = 0; m < M; ++m) {
        std::vector<SsaTerm> terms;
        if (ssaActive) {
            for (std::size_t n = 0; n < M; ++n) {
                if (n == m) continue;
                terms.push_back({networks[n].modalityId, stats.gates[m][n], ssaMean[m][n]});
            }
        }
        stats.perNetwork[m] = total_objective(clsMean[m], std::move(terms), cfg.lambda);
    }

    if (ssaActive) {
        // One-way transfer: the strictly best network must receive nothing.
        std::size_t bestIdx = 0;
        bool uniqueBest = true;
        for (std::size_t m = 1; m < M; ++m) {
            if (clsMean[m] < clsMean[bestIdx]) {
                bestIdx = m;
                uniqueBest = true;
            } else if (clsMean[m] == clsMean[bestIdx]) {
                uniqueBest = false;
            }
        }
        if (uniqueBest) {
            for (std::size_t n = 0; n < M; ++n) {
                if (n != bestIdx && stats.gates[bestIdx][n].rho != 0.0) {
                    stats.oneWayViolation = true;
                }
            }
            if (units[bestIdx * B].dAlign.size() != 0) {
                stats.oneWayViolation = true;
            }
        }
    }
    return stats;
}

namespace {

json layer_spec_json(const LayerSpec& l) {
    switch (l.kind) {
        case LayerKind::Conv3d:
            return {{"kind", "conv3d"}, {"kw", l.kw},         {"kh", l.kh},
                    {"kt", l.kt},       {"inCh", l.inCh},     {"outCh", l.outCh},
                    {"stride", l.stride}, {"pad", l.pad}};
        case LayerKind::Relu:
            return {{"kind", "relu"}};
        case LayerKind::MaxPool3d:
            return {{"kind", "maxpool3d"}, {"window", l.kw}, {"stride", l.stride}};
        case LayerKind::GlobalAvgPool:
            return {{"kind", "gavgpool"}};
        case LayerKind::Dense:
            return {{"kind", "dense"}, {"inCh", l.inCh}, {"outCh", l.outCh}};
    }
    throw ValidationError("unknown layer kind");
}

LayerSpec layer_spec_from_json(const json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "conv3d") {
        LayerSpec l{LayerKind::Conv3d};
        l.kw = j.at("kw").get<std::size_t>();
        l.kh = j.at("kh").get<std::size_t>();
        l.kt = j.at("kt").get<std::size_t>();
        l.inCh = j.at("inCh").get<std::size_t>();
        l.outCh = j.at("outCh").get<std::size_t>();
        l.stride = j.at("stride").get<std::size_t>();
        l.pad = j.at("pad").get<std::size_t>();
        return l;
    }
    if (kind == "relu") return LayerSpec::relu();
    if (kind == "maxpool3d") {
        return LayerSpec::maxpool3d(j.at("window").get<std::size_t>(),
                                    j.at("stride").get<std::size_t>());
    }
    if (kind == "gavgpool") return LayerSpec::gavgpool();
    if (kind == "dense") {
        return LayerSpec::dense(j.at("inCh").get<std::size_t>(), j.at("outCh").get<std::size_t>());
    }
    throw IoError("checkpoint: unknown layer kind '" + kind + "'");
}

std::vector<std::size_t> dims_from_json(const json& j) {
    std::vector<std::size_t> dims;
    for (const auto& v : j) dims.push_back(v.get<std::size_t>());
    return dims;
}

Tensor read_checkpoint_tensor(const std::filesystem::path& dir, const json& entry,
                              const char* fileKey, const char* dimsKey) {
    const std::filesystem::path path = dir / entry.at(fileKey).get<std::string>();
    Tensor t = read_tensor_file(path);
    if (t.dims() != dims_from_json(entry.at(dimsKey))) {
        throw IoError("checkpoint: tensor " + path.string() + " does not match index shape");
    }
    return t;
}

}  // namespace

void save_checkpoint(const std::vector<ModalityNetwork>& networks, const OptimizerState& state,
                     int epoch, const json& configEcho, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        throw IoError("checkpoint: cannot create " + dir.string() + ": " + ec.message());
    }
    json index;
    index["epoch"] = epoch;
    index["lr"] = state.lr;
    index["lrDrops"] = state.lrDrops;
    if (std::isfinite(state.plateau.best)) {
        index["plateauBest"] = state.plateau.best;
    } else {
        index["plateauBest"] = nullptr;
    }
    index["plateauSince"] = state.plateau.sinceImprove;
    index["config"] = configEcho;
    json nets = json::array();
    for (std::size_t ni = 0; ni < networks.size(); ++ni) {
        const ModalityNetwork& net = networks[ni];
        json layers = json::array();
        for (const LayerSpec& l : net.layers) layers.push_back(layer_spec_json(l));
        json params = json::array();
        for (std::size_t i = 0; i < net.params.size(); ++i) {
            if (net.params[i].weight.size() == 0) continue;
            const std::string stem = "net_" + net.modalityId + "_L" + std::to_string(i);
            write_tensor_file(dir / (stem + "_w.mtt"), net.params[i].weight, TensorDtype::Float64);
            write_tensor_file(dir / (stem + "_b.mtt"), net.params[i].bias, TensorDtype::Float64);
            const std::string vstem = "vel_" + net.modalityId + "_L" + std::to_string(i);
            write_tensor_file(dir / (vstem + "_w.mtt"), state.velocity[ni].perLayer[i].weight,
                              TensorDtype::Float64);
            write_tensor_file(dir / (vstem + "_b.mtt"), state.velocity[ni].perLayer[i].bias,
                              TensorDtype::Float64);
            params.push_back({{"layer", i},
                              {"weight", stem + "_w.mtt"},
                              {"weightDims", net.params[i].weight.dims()},
                              {"bias", stem + "_b.mtt"},
                              {"biasDims", net.params[i].bias.dims()},
                              {"velWeight", vstem + "_w.mtt"},
                              {"velBias", vstem + "_b.mtt"}});
        }
        nets.push_back({{"modality", net.modalityId},
                        {"alignLayerIndex", net.alignLayerIndex},
                        {"layers", layers},
                        {"params", params}});
    }
    index["networks"] = nets;
    std::ofstream out(dir / "index.json", std::ios::trunc);
    out << index.dump(2) << '\n';
    if (!out) {
        throw IoError("checkpoint: cannot write index under " + dir.string());
    }
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream in(dir / "index.json");
    if (!in) {
        throw IoError("checkpoint: cannot open " + (dir / "index.json").string());
    }
    json index;
    try {
        in >> index;
    } catch (const json::exception& e) {
        throw IoError("checkpoint: malformed index.json: " + std::string(e.what()));
    }
    Checkpoint ckpt;
    try {
        ckpt.epoch = index.at("epoch").get<int>();
        ckpt.state.lr = index.at("lr").get<double>();
        ckpt.state.lrDrops = index.at("lrDrops").get<int>();
        if (index.at("plateauBest").is_null()) {
            ckpt.state.plateau.best = std::numeric_limits<double>::infinity();
        } else {
            ckpt.state.plateau.best = index.at("plateauBest").get<double>();
        }
        ckpt.state.plateau.sinceImprove = index.at("plateauSince").get<int>();
        ckpt.configEcho = index.value("config", json::object());
        for (const json& netJson : index.at("networks")) {
            ModalityNetwork net;
            net.modalityId = netJson.at("modality").get<std::string>();
            net.alignLayerIndex = netJson.at("alignLayerIndex").get<std::size_t>();
            for (const json& l : netJson.at("layers")) {
                net.layers.push_back(layer_spec_from_json(l));
            }
            net.params.resize(net.layers.size());
            Gradients vel;
            vel.perLayer.resize(net.layers.size());
            for (const json& p : netJson.at("params")) {
                const std::size_t i = p.at("layer").get<std::size_t>();
                if (i >= net.layers.size()) {
                    throw IoError("checkpoint: param layer index out of range");
                }
                net.params[i].weight = read_checkpoint_tensor(dir, p, "weight", "weightDims");
                net.params[i].bias = read_checkpoint_tensor(dir, p, "bias", "biasDims");
                vel.perLayer[i].weight = read_checkpoint_tensor(dir, p, "velWeight", "weightDims");
                vel.perLayer[i].bias = read_checkpoint_tensor(dir, p, "velBias", "biasDims");
            }
            ckpt.networks.push_back(std::move(net));
            ckpt.state.velocity.push_back(std::move(vel));
        }
    } catch (const json::exception& e) {
        throw IoError("checkpoint: bad index.json: " + std::string(e.what()));
    }
    return ckpt;
}

namespace {

struct LoadedDataset {
    std::vector<GestureClip> clips;
    std::vector<std::string> modalities;
    std::size_t classCount = 0;
    std::vector<std::size_t> inputDims;
};

LoadedDataset load_train_set(const TrainConfig& cfg, const std::filesystem::path& datasetDir) {
    const auto manifestPath = datasetDir / "train.jsonl";
    if (!std::filesystem::exists(manifestPath)) {
        throw ValidationError("train: dataset manifest not found: " + manifestPath.string());
    }
    LoadedDataset ds;
    const auto records = load_manifest(manifestPath);
    if (records.empty()) {
        throw ValidationError("train: empty manifest " + manifestPath.string());
    }

    if (cfg.modalities.empty()) {
        for (const auto& [name, path] : records.front().modalityPaths) {
            ds.modalities.push_back(name);
        }
    } else {
        ds.modalities = cfg.modalities;
        for (const std::string& m : ds.modalities) {
            if (records.front().modalityPaths.find(m) == records.front().modalityPaths.end()) {
                throw ValidationError("train: dataset has no modality '" + m + "'");
            }
        }
    }

    ds.clips.reserve(records.size());
    std::size_t maxLabel = 0;
    for (const ClipRecord& rec : records) {
        GestureClip clip;
        clip.id = rec.id;
        clip.label = rec.label;
        maxLabel = std::max(maxLabel, rec.label);
        for (const std::string& m : ds.modalities) {
            auto it = rec.modalityPaths.find(m);
            if (it == rec.modalityPaths.end()) {
                throw ValidationError("train: clip " + rec.id + " lacks modality '" + m + "'");
            }
            if (!std::filesystem::exists(it->second)) {
                throw IoError("clip " + rec.id + ": missing tensor file " + it->second.string());
            }
            clip.modalities.emplace(m, read_tensor_file(it->second));
        }
        ds.clips.push_back(std::move(clip));
    }

    ds.classCount = maxLabel + 1;
    const auto cfgPath = datasetDir / "config.json";
    if (std::filesystem::exists(cfgPath)) {
        std::ifstream in(cfgPath);
        json j;
        try {
            in >> j;
            ds.classCount = j.value("classCount", ds.classCount);
        } catch (const json::exception&) {
            // fall back to the label scan
        }
    }
    ds.inputDims = ds.clips.front().modalities.at(ds.modalities.front()).dims();
    return ds;
}

json train_config_json(const TrainConfig& cfg) {
    return json{{"lambda", cfg.lambda},
                {"beta", cfg.beta},
                {"pretrainEpochs", cfg.pretrainEpochs},
                {"ssaEpochs", cfg.ssaEpochs},
                {"baseLr", cfg.baseLr},
                {"momentum", cfg.momentum},
                {"batchSize", cfg.batchSize},
                {"seed", cfg.seed},
                {"mode", cfg.mode == TrainMode::Mtut ? "mtut" : "baseline"},
                {"plateauPatience", cfg.plateauPatience},
                {"plateauDelta", cfg.plateauDelta},
                {"maxLrDrops", cfg.maxLrDrops},
                {"modalities", cfg.modalities}};
}

json epoch_metrics_json(const EpochMetrics& em) {
    json j{{"epoch", em.epoch}, {"phase", em.phase}, {"lr", em.lr}};
    j["cls"] = em.clsLoss;
    j["total"] = em.totalLoss;
    if (!em.rhoMean.empty()) {
        j["rho"] = em.rhoMean;
        j["ssa"] = em.ssaMean;
    }
    return j;
}

TrainResult run_epochs(std::vector<ModalityNetwork>& networks, OptimizerState& state,
                       int startEpoch, const TrainConfig& cfg, const LoadedDataset& ds,
                       const std::filesystem::path& outDir, const json& configEcho) {
    TrainResult result;
    for (const auto& net : networks) result.modalities.push_back(net.modalityId);

    std::ofstream metrics(outDir / "metrics.jsonl", std::ios::trunc);
    if (!metrics) {
        throw IoError("train: cannot open metrics log under " + outDir.string());
    }

    const std::size_t M = networks.size();
    for (int epoch = startEpoch; epoch <= cfg.totalEpochs(); ++epoch) {
        const TrainPhase phase =
            epoch <= cfg.pretrainEpochs ? TrainPhase::Pretrain : TrainPhase::Ssa;
        if (epoch == cfg.pretrainEpochs + 1) {
            state.plateau = PlateauTracker{};  // fresh tracker, same lr
        }

        RngStream shuffleRng =
            RngStream::derive(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch));
        const auto batches = batch_indices(ds.clips.size(), static_cast<std::size_t>(cfg.batchSize),
                                           shuffleRng, true);

        EpochMetrics em;
        em.epoch = epoch;
        em.phase = phase == TrainPhase::Pretrain ? "pretrain" : "ssa";
        std::vector<double> clsSum(M, 0.0), totalSum(M, 0.0);
        std::vector<std::vector<double>> rhoSum(M, std::vector<double>(M, 0.0));
        std::vector<std::vector<double>> ssaSum(M, std::vector<double>(M, 0.0));
        bool sawGates = false;

        for (const auto& batch : batches) {
            std::vector<const GestureClip*> clips;
            clips.reserve(batch.size());
            for (std::size_t idx : batch) clips.push_back(&ds.clips[idx]);
            StepStats stats = cotrain_step(networks, clips, cfg, phase, state);
            for (std::size_t m = 0; m < M; ++m) {
                clsSum[m] += stats.perNetwork[m].clsLoss;
                totalSum[m] += stats.perNetwork[m].total;
                for (const SsaTerm& t : stats.perNetwork[m].ssaTerms) {
                    sawGates = true;
                    for (std::size_t n = 0; n < M; ++n) {
                        if (networks[n].modalityId == t.otherModality) {
                            rhoSum[m][n] += t.gate.rho;
                            ssaSum[m][n] += t.ssaValue;
                        }
                    }
                }
            }
            if (stats.oneWayViolation) ++result.oneWayViolations;
            result.steps.push_back(std::move(stats));
        }

        const double stepCount = static_cast<double>(batches.size());
        double epochLoss = 0.0;
        for (std::size_t m = 0; m < M; ++m) {
            em.clsLoss[networks[m].modalityId] = clsSum[m] / stepCount;
            em.totalLoss[networks[m].modalityId] = totalSum[m] / stepCount;
            epochLoss += totalSum[m] / stepCount;
        }
        epochLoss /= static_cast<double>(M);
        if (sawGates) {
            for (std::size_t m = 0; m < M; ++m) {
                for (std::size_t n = 0; n < M; ++n) {
                    if (n == m) continue;
                    em.rhoMean[networks[m].modalityId][networks[n].modalityId] =
                        rhoSum[m][n] / stepCount;
                    em.ssaMean[networks[m].modalityId][networks[n].modalityId] =
                        ssaSum[m][n] / stepCount;
                }
            }
        }

        lr_schedule_update(state, epochLoss, cfg.plateauPatience, cfg.plateauDelta,
                           cfg.maxLrDrops);
        em.lr = state.lr;  // lr after this epoch's schedule update
        metrics << epoch_metrics_json(em).dump() << '\n';
        result.epochs.push_back(std::move(em));

        if (epoch == cfg.pretrainEpochs) {
            save_checkpoint(networks, state, epoch, configEcho, outDir / "checkpoint_pretrain");
        }
    }
    save_checkpoint(networks, state, cfg.totalEpochs(), configEcho, outDir / "checkpoint_final");
    if (!metrics) {
        throw IoError("train: metrics log write failed");
    }
    return result;
}

void check_alignment_extents(const std::vector<ModalityNetwork>& networks,
                             const LoadedDataset& ds) {
    std::vector<std::size_t> ref;
    for (const ModalityNetwork& net : networks) {
        const ForwardResult fwd =
            network_forward(net, ds.clips.front().modalities.at(net.modalityId));
        const auto& dims = fwd.alignOutput(net).dims();
        const std::vector<std::size_t> spatiotemporal(dims.begin(), dims.begin() + 3);
        if (ref.empty()) {
            ref = spatiotemporal;
        } else if (ref != spatiotemporal) {
            throw ValidationError("train: alignment layer extents differ across networks");
        }
    }
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const std::filesystem::path& datasetDir,
                  const std::filesystem::path& outDir, const std::optional<json>& configEcho) {
    cfg.validate();
    const LoadedDataset ds = load_train_set(cfg, datasetDir);

    std::error_code ec;
    std::filesystem::create_directories(outDir, ec);
    if (ec) {
        throw IoError("train: cannot create " + outDir.string() + ": " + ec.message());
    }

    std::vector<ModalityNetwork> networks;
    for (const std::string& m : ds.modalities) {
        RngStream initRng = RngStream::derive(cfg.seed, "init/" + m);
        networks.push_back(init_network(m, mini_gesture_net(ds.inputDims[3], ds.classCount),
                                        mini_gesture_net_align_index(), ds.inputDims, initRng));
    }
    check_alignment_extents(networks, ds);

    OptimizerState state;
    state.lr = cfg.baseLr;
    for (const auto& net : networks) state.velocity.push_back(zero_like_params(net));

    const json echo = configEcho.value_or(json{{"train", train_config_json(cfg)}});
    {
        std::ofstream out(outDir / "config.json", std::ios::trunc);
        out << echo.dump(2) << '\n';
        if (!out) {
            throw IoError("train: cannot write config echo under " + outDir.string());
        }
    }
    return run_epochs(networks, state, 1, cfg, ds, outDir, echo);
}

TrainResult train_resume(const TrainConfig& cfg, const std::filesystem::path& datasetDir,
                         const std::filesystem::path& outDir,
                         const std::filesystem::path& checkpointDir) {
    cfg.validate();
    Checkpoint ckpt = load_checkpoint(checkpointDir);
    const LoadedDataset ds = load_train_set(cfg, datasetDir);
    if (ckpt.networks.size() != ds.modalities.size()) {
        throw ValidationError("resume: checkpoint network count does not match dataset");
    }
    for (std::size_t i = 0; i < ckpt.networks.size(); ++i) {
        if (ckpt.networks[i].modalityId != ds.modalities[i]) {
            throw ValidationError("resume: checkpoint modalities do not match dataset");
        }
    }
    std::error_code ec;
    std::filesystem::create_directories(outDir, ec);
    if (ec) {
        throw IoError("resume: cannot create " + outDir.string() + ": " + ec.message());
    }
    const json echo = ckpt.configEcho.is_null() ? json{{"train", train_config_json(cfg)}}
                                                : ckpt.configEcho;
    return run_epochs(ckpt.networks, ckpt.state, ckpt.epoch + 1, cfg, ds, outDir, echo);
}

}  // namespace mtut
