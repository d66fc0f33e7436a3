#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "synbind/image.hpp"
#include "synbind/syntax.hpp"
#include "synbind/text_encoder.hpp"
#include "synbind/unet.hpp"

namespace synbind {

struct NoiseSchedule {
    std::vector<float> alpha_bar;  // index t in [0, T], alpha_bar[0] == 1

    int timesteps() const { return static_cast<int>(alpha_bar.size()) - 1; }
    static NoiseSchedule make(const std::string& kind, int timesteps);
};

// Everything the denoiser needs for one prompt.
struct PromptBundle {
    Mat encoding;  // n x text_dim
    DependencyMatrix dep;
    std::vector<std::string> token_strings;
};

enum class GenMode { Baseline, Fca };

struct GenerateOptions {
    GenMode mode          = GenMode::Baseline;
    float threshold       = 0.5f;
    float early_stop_frac = 0.1f;  // fraction of steps recorded in the first pass
    bool record_attention = false; // record the (single or second) pass for dumps
};

struct GenerationResult {
    Image image;
    AttentionRecord record;         // cond-branch maps (first pass in fca mode)
    std::optional<FocusMask> mask;  // mask used by the second pass
    uint64_t seed = 0;
    DenoiserConfig config;
};

class DiffusionModel {
public:
    DiffusionModel(const DenoiserConfig& cfg, const Mat& uncond_encoding, uint64_t init_seed);

    const DenoiserConfig& config() const { return cfg_; }
    const NoiseSchedule& schedule() const { return schedule_; }
    ParamStore<float>& store() { return *store_; }
    const Mat& uncond_encoding() const { return uncond_; }
    const UNet<float>& net() const { return *net_; }

    // Single-sample denoiser query: noise estimate plus every
    // cross-attention layer's head-averaged maps at its own grid.
    struct StepResult {
        Mat eps;  // (S*S) x 3
        std::vector<AttentionEntry> maps;
    };
    StepResult denoise_step(const Mat& x_t, const Mat& y, int t, const FocusMask* mask = nullptr) const;

    void save(const std::string& dir) const;
    static DiffusionModel load(const std::string& dir);

    friend std::vector<GenerationResult> generate_batch(DiffusionModel&, const std::vector<PromptBundle>&,
                                                        const std::vector<uint64_t>&, const GenerateOptions&);
    friend struct DiffusionTrainer;

private:
    DenoiserConfig cfg_;
    NoiseSchedule schedule_;
    std::shared_ptr<ParamStore<float>> store_;
    std::shared_ptr<UNet<float>> net_;
    Mat uncond_;  // encoding of the empty prompt, used for guidance
};

// One generation job; samples in the batch evolve independently (their
// noise streams depend only on their own seed).
std::vector<GenerationResult> generate_batch(DiffusionModel& model, const std::vector<PromptBundle>& prompts,
                                             const std::vector<uint64_t>& seeds, const GenerateOptions& opts);

GenerationResult generate(DiffusionModel& model, const PromptBundle& prompt, uint64_t seed,
                          const GenerateOptions& opts);

struct DiffusionTrainSample {
    Mat x0;            // (S*S) x 3 in [-1, 1]
    const Mat* encoding;  // cached caption encoding
};

struct DiffusionTrainConfig {
    int steps         = 3000;
    int batch         = 16;
    int chunks        = 4;  // fixed tape-chunk count; reduction order is by chunk id
    float lr          = 2e-3f;
    float cfg_dropout = 0.1f;
    uint64_t seed     = 1;
    int log_every     = 100;
};

std::vector<TrainLogEntry> train_toy_diffusion(DiffusionModel& model,
                                               const std::vector<DiffusionTrainSample>& dataset,
                                               const DiffusionTrainConfig& cfg);

}  // namespace synbind
