#include "mtut/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <utility>

#include <nlohmann/json.hpp>

#include "mtut/tensor_io.hpp"

namespace mtut {

namespace {

using nlohmann::json;

// Blob geometry: 3x3 square, 1-pixel blur halo, so centers need a 2-pixel
// margin to keep the whole support in frame.
constexpr double kMargin = 2.0;

double clampCenter(double v, std::size_t extent) {
    return std::clamp(v, kMargin, static_cast<double>(extent) - 1.0 - kMargin);
}

struct Vec2 {
    double x, y;
};

Vec2 swipeDirection(std::size_t classIdx) {
    const double inv = 1.0 / std::numbers::sqrt2;
    switch (classIdx) {
        case 0: return {1.0, 0.0};    // swipe right
        case 1: return {-1.0, 0.0};   // swipe left
        case 2: return {0.0, -1.0};   // swipe up
        case 3: return {0.0, 1.0};    // swipe down
        case 4: return {inv, inv};    // diagonal down-right
        default: return {-inv, -inv}; // diagonal up-left (class 5)
    }
}

}  // namespace

const char* gesture_class_name(std::size_t classIdx) {
    static const char* names[kGestureClassCount] = {
        "swipe_right", "swipe_left",  "swipe_up",  "swipe_down",
        "diag_down_right", "diag_up_left", "circle_cw", "circle_ccw",
    };
    if (classIdx >= kGestureClassCount) {
        throw ValidationError("gesture class index out of range");
    }
    return names[classIdx];
}

TrajectoryParams sample_trajectory(std::size_t classIdx, std::size_t width, std::size_t height,
                                   RngStream& rng) {
    if (classIdx >= kGestureClassCount) {
        throw ValidationError("trajectory: class index out of range");
    }
    TrajectoryParams p;
    const double w = static_cast<double>(width);
    const double h = static_cast<double>(height);
    if (classIdx < 6) {
        p.speed = 0.5 + 0.4 * rng.nextUniform();
        const Vec2 dir = swipeDirection(classIdx);
        auto uniform = [&rng](double lo, double hi) { return lo + (hi - lo) * rng.nextUniform(); };
        // Start in a band on the side opposite the motion so most of the
        // frame gets traversed; the free axis is unconstrained.
        auto startFor = [&](double d, double extent) {
            const double lo = kMargin;
            const double hi = extent - 1.0 - kMargin;
            if (d > 0.0) return uniform(lo, lo + 3.0);
            if (d < 0.0) return uniform(hi - 3.0, hi);
            return uniform(lo, hi);
        };
        p.startX = startFor(dir.x, w);
        p.startY = startFor(dir.y, h);
    } else {
        p.centerX = (w - 1.0) / 2.0 + (rng.nextUniform() * 2.0 - 1.0);
        p.centerY = (h - 1.0) / 2.0 + (rng.nextUniform() * 2.0 - 1.0);
        p.radius = 3.0 + 2.0 * rng.nextUniform();
        p.phase = 2.0 * std::numbers::pi * rng.nextUniform();
        p.turns = 0.75 + 0.5 * rng.nextUniform();
    }
    return p;
}

std::vector<std::pair<std::size_t, std::size_t>> trajectory_centers(
    std::size_t classIdx, const TrajectoryParams& params, std::size_t width, std::size_t height,
    std::size_t frames) {
    std::vector<std::pair<std::size_t, std::size_t>> centers(frames);
    for (std::size_t t = 0; t < frames; ++t) {
        double cx, cy;
        if (classIdx < 6) {
            const Vec2 dir = swipeDirection(classIdx);
            cx = params.startX + params.speed * static_cast<double>(t) * dir.x;
            cy = params.startY + params.speed * static_cast<double>(t) * dir.y;
        } else {
            const double sign = classIdx == 6 ? 1.0 : -1.0;
            const double angle =
                params.phase + sign * 2.0 * std::numbers::pi * params.turns *
                                   static_cast<double>(t) / static_cast<double>(frames);
            cx = params.centerX + params.radius * std::cos(angle);
            cy = params.centerY + params.radius * std::sin(angle);
        }
        cx = clampCenter(cx, width);
        cy = clampCenter(cy, height);
        centers[t] = {static_cast<std::size_t>(std::llround(cx)),
                      static_cast<std::size_t>(std::llround(cy))};
    }
    return centers;
}

namespace {

// One (W, H) intensity frame with the blob drawn at the given center.
void drawFrame(std::vector<double>& frame, std::size_t width, std::size_t height, std::size_t cx,
               std::size_t cy) {
    std::fill(frame.begin(), frame.end(), 0.0);
    for (std::size_t dx = 0; dx < 3; ++dx) {
        for (std::size_t dy = 0; dy < 3; ++dy) {
            frame[(cx - 1 + dx) * height + (cy - 1 + dy)] = 1.0;
        }
    }
}

std::vector<double> boxBlur(const std::vector<double>& frame, std::size_t width,
                            std::size_t height) {
    std::vector<double> out(frame.size(), 0.0);
    for (std::size_t x = 0; x < width; ++x) {
        for (std::size_t y = 0; y < height; ++y) {
            double sum = 0.0;
            for (int dx = -1; dx <= 1; ++dx) {
                for (int dy = -1; dy <= 1; ++dy) {
                    const std::ptrdiff_t nx = static_cast<std::ptrdiff_t>(x) + dx;
                    const std::ptrdiff_t ny = static_cast<std::ptrdiff_t>(y) + dy;
                    if (nx < 0 || ny < 0 || nx >= static_cast<std::ptrdiff_t>(width) ||
                        ny >= static_cast<std::ptrdiff_t>(height)) {
                        continue;  // zero padding
                    }
                    sum += frame[static_cast<std::size_t>(nx) * height +
                                 static_cast<std::size_t>(ny)];
                }
            }
            out[x * height + y] = sum / 9.0;
        }
    }
    return out;
}

}  // namespace

std::map<std::string, Tensor> render_clip(std::size_t classIdx, const TrajectoryParams& params,
                                          const std::vector<ModalityConfig>& modalities,
                                          std::size_t width, std::size_t height,
                                          std::size_t frames) {
    const auto centers = trajectory_centers(classIdx, params, width, height, frames);

    // Base intensity frames shared by every render style.
    std::vector<std::vector<double>> base(frames, std::vector<double>(width * height, 0.0));
    for (std::size_t t = 0; t < frames; ++t) {
        drawFrame(base[t], width, height, centers[t].first, centers[t].second);
    }

    std::map<std::string, Tensor> out;
    for (const ModalityConfig& mod : modalities) {
        Tensor tensor({width, height, frames, 1});
        for (std::size_t t = 0; t < frames; ++t) {
            std::vector<double> frame;
            if (mod.render == "intensity") {
                frame = base[t];
            } else if (mod.render == "inverted_blur") {
                frame = boxBlur(base[t], width, height);
                for (double& v : frame) v = 1.0 - v;
            } else if (mod.render == "temporal_diff") {
                frame.assign(width * height, 0.0);
                for (std::size_t i = 0; i < frame.size(); ++i) {
                    const double prev = t == 0 ? 0.0 : base[t - 1][i];
                    frame[i] = std::clamp(base[t][i] - prev, 0.0, 1.0);
                }
            } else {
                throw ValidationError("render_clip: unknown render style '" + mod.render + "'");
            }
            for (std::size_t x = 0; x < width; ++x) {
                for (std::size_t y = 0; y < height; ++y) {
                    tensor.at4(x, y, t, 0) = std::clamp(frame[x * height + y], 0.0, 1.0);
                }
            }
        }
        out.emplace(mod.name, std::move(tensor));
    }
    return out;
}

void corrupt(GestureClip& clip, const std::string& modalityId, double noiseSigma,
             double dropoutProb, RngStream& rng) {
    if (noiseSigma < 0.0 || dropoutProb < 0.0 || dropoutProb > 1.0) {
        throw ValidationError("corrupt: sigma must be >= 0 and p in [0,1]");
    }
    auto it = clip.modalities.find(modalityId);
    if (it == clip.modalities.end()) {
        throw ValidationError("corrupt: unknown modality '" + modalityId + "'");
    }
    Tensor& t = it->second;
    if (noiseSigma > 0.0) {
        double* d = t.data();
        for (std::size_t i = 0; i < t.size(); ++i) {
            d[i] += noiseSigma * rng.nextNormal();
        }
    }
    if (dropoutProb > 0.0) {
        const std::size_t W = t.dims()[0], H = t.dims()[1], T = t.dims()[2], C = t.dims()[3];
        for (std::size_t frame = 0; frame < T; ++frame) {
            if (rng.nextUniform() < dropoutProb) {
                for (std::size_t x = 0; x < W; ++x) {
                    for (std::size_t y = 0; y < H; ++y) {
                        for (std::size_t c = 0; c < C; ++c) {
                            t.at4(x, y, frame, c) = 0.0;
                        }
                    }
                }
            }
        }
    }
    if (!t.allFinite()) {
        throw ValidationError("corrupt: produced non-finite values");
    }
}

namespace {

void validate_spec(const DatasetSpec& spec) {
    if (spec.classCount < 2 || spec.classCount > kGestureClassCount) {
        throw ValidationError("dataset: classCount must be in [2, 8]");
    }
    if (spec.trainCount == 0 || spec.testCount == 0) {
        throw ValidationError("dataset: counts must be positive");
    }
    if (spec.trainCount % spec.classCount != 0 || spec.testCount % spec.classCount != 0) {
        throw ValidationError("dataset: counts must divide by classCount for balance");
    }
    if (spec.modalities.empty()) {
        throw ValidationError("dataset: at least one modality required");
    }
    if (spec.width < 8 || spec.height < 8 || spec.frames < 2) {
        throw ValidationError("dataset: extents too small for the blob geometry");
    }
}

GestureClip make_clip(const DatasetSpec& spec, const std::string& split, std::size_t index) {
    GestureClip clip;
    char idBuf[32];
    std::snprintf(idBuf, sizeof(idBuf), "%s_%04zu", split.c_str(), index);
    clip.id = idBuf;
    clip.label = index % spec.classCount;

    RngStream trajRng = RngStream::derive(spec.seed, split + "/traj", index);
    const TrajectoryParams params =
        sample_trajectory(clip.label, spec.width, spec.height, trajRng);
    clip.modalities =
        render_clip(clip.label, params, spec.modalities, spec.width, spec.height, spec.frames);
    for (const ModalityConfig& mod : spec.modalities) {
        if (mod.noiseSigma > 0.0 || mod.dropoutProb > 0.0) {
            RngStream noiseRng = RngStream::derive(spec.seed, split + "/noise/" + mod.name, index);
            corrupt(clip, mod.name, mod.noiseSigma, mod.dropoutProb, noiseRng);
        }
    }
    return clip;
}

json dataset_config_json(const DatasetSpec& spec) {
    json mods = json::array();
    for (const ModalityConfig& m : spec.modalities) {
        mods.push_back({{"name", m.name},
                        {"render", m.render},
                        {"noiseSigma", m.noiseSigma},
                        {"dropoutProb", m.dropoutProb}});
    }
    return json{{"classCount", spec.classCount}, {"trainCount", spec.trainCount},
                {"testCount", spec.testCount},   {"width", spec.width},
                {"height", spec.height},         {"frames", spec.frames},
                {"modalities", mods},            {"seed", spec.seed}};
}

}  // namespace

void generate_dataset(const DatasetSpec& spec, const std::filesystem::path& outDir) {
    validate_spec(spec);
    std::error_code ec;
    std::filesystem::create_directories(outDir / "tensors", ec);
    if (ec) {
        throw IoError("dataset: cannot create " + (outDir / "tensors").string() + ": " +
                      ec.message());
    }

    for (const std::string split : {"train", "test"}) {
        const std::size_t count = split == "train" ? spec.trainCount : spec.testCount;
        std::ofstream manifest(outDir / (split + ".jsonl"), std::ios::trunc);
        if (!manifest) {
            throw IoError("dataset: cannot open manifest for " + split);
        }
        for (std::size_t i = 0; i < count; ++i) {
            GestureClip clip = make_clip(spec, split, i);
            json paths = json::object();
            for (const auto& [name, tensor] : clip.modalities) {
                const std::string rel = "tensors/" + clip.id + "_" + name + ".mtt";
                write_tensor_file(outDir / rel, tensor, TensorDtype::Float32);
                paths[name] = rel;
            }
            manifest << json{{"id", clip.id}, {"label", clip.label}, {"modalities", paths}}.dump()
                     << '\n';
        }
    }

    std::ofstream cfg(outDir / "config.json", std::ios::trunc);
    cfg << dataset_config_json(spec).dump(2) << '\n';
    if (!cfg) {
        throw IoError("dataset: cannot write config echo");
    }
}

std::vector<ClipRecord> load_manifest(const std::filesystem::path& manifestPath) {
    std::ifstream in(manifestPath);
    if (!in) {
        throw IoError("manifest " + manifestPath.string() + ": cannot open");
    }
    const std::filesystem::path base = manifestPath.parent_path();
    std::vector<ClipRecord> records;
    std::string line;
    std::size_t lineNo = 0;
    while (std::getline(in, line)) {
        ++lineNo;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw IoError("manifest " + manifestPath.string() + " line " +
                          std::to_string(lineNo) + ": " + e.what());
        }
        ClipRecord rec;
        rec.id = j.at("id").get<std::string>();
        rec.label = j.at("label").get<std::size_t>();
        for (const auto& [name, rel] : j.at("modalities").items()) {
            rec.modalityPaths[name] = base / rel.get<std::string>();
        }
        records.push_back(std::move(rec));
    }
    return records;
}

GestureClip load_clip(const ClipRecord& record) {
    GestureClip clip;
    clip.id = record.id;
    clip.label = record.label;
    for (const auto& [name, path] : record.modalityPaths) {
        if (!std::filesystem::exists(path)) {
            throw IoError("clip " + record.id + ": missing tensor file " + path.string());
        }
        clip.modalities.emplace(name, read_tensor_file(path));
    }
    return clip;
}

std::vector<std::vector<std::size_t>> batch_indices(std::size_t clipCount, std::size_t batchSize,
                                                    RngStream& rng, bool shuffle) {
    if (batchSize == 0) {
        throw ValidationError("batch_indices: batchSize must be positive");
    }
    std::vector<std::size_t> order(clipCount);
    for (std::size_t i = 0; i < clipCount; ++i) order[i] = i;
    if (shuffle) {
        // Fisher-Yates, high to low.
        for (std::size_t i = clipCount; i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(rng.nextUniform() * static_cast<double>(i));
            std::swap(order[i - 1], order[j < i ? j : i - 1]);
        }
    }
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < clipCount; start += batchSize) {
        const std::size_t end = std::min(clipCount, start + batchSize);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

}  // namespace mtut
