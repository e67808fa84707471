#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mtut/tensor.hpp"

namespace mtut {

// Rendering styles for one modality stream derived from the shared blob
// trajectory. "intensity": bright 3x3 square on black. "inverted_blur":
// 1-pixel box blur of the intensity view, inverted (depth-like style).
// "temporal_diff": positive part of the frame-to-frame intensity change
// (flow-like); frame 0 diffs against an empty frame.
struct ModalityConfig {
    std::string name;
    std::string render = "intensity";
    double noiseSigma = 0.0;
    double dropoutProb = 0.0;
};

struct DatasetSpec {
    std::size_t classCount = 8;
    std::size_t trainCount = 400;
    std::size_t testCount = 200;
    std::size_t width = 16, height = 16, frames = 16;
    std::vector<ModalityConfig> modalities = {{"a", "intensity", 0.0, 0.0},
                                              {"b", "inverted_blur", 0.5, 0.0}};
    std::uint64_t seed = 7;
};

// One labeled sample; every modality tensor comes from the same blob
// trajectory, so the streams are spatially and temporally aligned.
struct GestureClip {
    std::string id;
    std::size_t label = 0;
    std::map<std::string, Tensor> modalities;  // each (W, H, T, 1)
};

// Continuous blob-center path; gesture classes 0..7 are four axis swipes,
// two diagonal swipes, and clockwise / counter-clockwise circles.
struct TrajectoryParams {
    double startX = 0.0, startY = 0.0;
    double speed = 0.0;    // px per frame (swipes)
    double radius = 0.0;   // circles
    double phase = 0.0;    // circles
    double turns = 1.0;    // circles, fraction of full revolutions
    double centerX = 0.0, centerY = 0.0;
};

constexpr std::size_t kGestureClassCount = 8;
const char* gesture_class_name(std::size_t classIdx);

TrajectoryParams sample_trajectory(std::size_t classIdx, std::size_t width, std::size_t height,
                                   RngStream& rng);

// Integer blob centers per frame, clamped so the blob plus its blur halo
// stays inside the frame.
std::vector<std::pair<std::size_t, std::size_t>> trajectory_centers(
    std::size_t classIdx, const TrajectoryParams& params, std::size_t width, std::size_t height,
    std::size_t frames);

std::map<std::string, Tensor> render_clip(std::size_t classIdx, const TrajectoryParams& params,
                                          const std::vector<ModalityConfig>& modalities,
                                          std::size_t width, std::size_t height,
                                          std::size_t frames);

// Gaussian noise on every value of the named modality, then whole frames
// zeroed independently with probability dropoutProb. Draw order: all noise
// values in row-major order, then one uniform per frame.
void corrupt(GestureClip& clip, const std::string& modalityId, double noiseSigma,
             double dropoutProb, RngStream& rng);

// Writes tensors/*.mtt plus train.jsonl / test.jsonl manifests and a
// config.json echo. Byte-identical for identical spec + seed.
void generate_dataset(const DatasetSpec& spec, const std::filesystem::path& outDir);

struct ClipRecord {
    std::string id;
    std::size_t label = 0;
    std::map<std::string, std::filesystem::path> modalityPaths;  // resolved
};

std::vector<ClipRecord> load_manifest(const std::filesystem::path& manifestPath);

GestureClip load_clip(const ClipRecord& record);

// Per-epoch batch index lists: seeded Fisher-Yates permutation when
// shuffling, manifest order otherwise; the last partial batch is kept.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t clipCount, std::size_t batchSize,
                                                    RngStream& rng, bool shuffle);

}  // namespace mtut
