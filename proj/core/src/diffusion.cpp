#include "synbind/diffusion.hpp"

#include <omp.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace synbind {

using nlohmann::json;

NoiseSchedule NoiseSchedule::make(const std::string& kind, int timesteps) {
    if (timesteps < 1) throw ParamError("noise schedule: timesteps must be >= 1");
    NoiseSchedule s;
    s.alpha_bar.resize(timesteps + 1);
    if (kind == "cosine") {
        auto f = [&](double t) {
            double v = std::cos((t / timesteps + 0.008) / 1.008 * M_PI / 2.0);
            return v * v;
        };
        double f0 = f(0.0);
        for (int t = 0; t <= timesteps; ++t)
            s.alpha_bar[t] = static_cast<float>(std::clamp(f(t) / f0, 1e-5, 1.0));
    } else if (kind == "linear") {
        double scale = 1000.0 / timesteps;
        double b0 = 1e-4 * scale, b1 = 0.02 * scale;
        double prod    = 1.0;
        s.alpha_bar[0] = 1.f;
        for (int t = 1; t <= timesteps; ++t) {
            double beta = std::min(0.999, b0 + (b1 - b0) * (t - 1) / std::max(1, timesteps - 1));
            prod *= 1.0 - beta;
            s.alpha_bar[t] = static_cast<float>(std::max(prod, 1e-7));
        }
    } else {
        throw ParamError("noise schedule: unknown kind '" + kind + "'");
    }
    s.alpha_bar[0] = 1.f;
    return s;
}

DiffusionModel::DiffusionModel(const DenoiserConfig& cfg, const Mat& uncond_encoding, uint64_t init_seed)
    : cfg_(cfg), uncond_(uncond_encoding) {
    cfg.validate();
    if (uncond_.cols() != cfg.text_dim)
        throw ShapeError("diffusion: unconditional encoding width does not match text_dim");
    schedule_ = NoiseSchedule::make(cfg.schedule, cfg.timesteps);
    store_    = std::make_shared<ParamStore<float>>();
    Rng rng(mix_seed(init_seed, 0xd1ff));
    net_ = std::make_shared<UNet<float>>(cfg, *store_, rng);
}

DiffusionModel::StepResult DiffusionModel::denoise_step(const Mat& x_t, const Mat& y, int t,
                                                        const FocusMask* mask) const {
    Tape<float> tape;
    Binder<float> bind(tape);
    int x = tape.input(x_t);
    std::vector<const Mat*> ys{&y};
    std::vector<const FocusMask*> masks{mask};
    std::vector<std::vector<UNet<float>::AttentionTap>> taps;
    int eps = net_->forward(tape, bind, x, {t}, ys, mask ? &masks : nullptr, &taps);

    StepResult out;
    out.eps = tape.val(eps);
    for (auto& tap : taps[0]) {
        AttentionEntry e;
        e.layer    = tap.layer;
        e.timestep = t;
        e.h = e.w = cfg_.level_size(tap.level);
        e.map     = std::move(tap.probs);
        out.maps.push_back(std::move(e));
    }
    return out;
}

// ------------------------------------------------------------- generation

namespace {

struct SampleState {
    Mat x;  // current x_t
    Mat x_T;
    const PromptBundle* prompt = nullptr;
    uint64_t seed              = 0;
    AttentionRecord record;
    std::optional<FocusMask> mask;
};

Mat initial_noise(int pixels, uint64_t seed) {
    Rng rng(mix_seed(seed, 0x71));
    Mat x(pixels, 3);
    for (int i = 0; i < pixels; ++i)
        for (int c = 0; c < 3; ++c) x(i, c) = rng.normal_f();
    return x;
}

Mat step_noise(int pixels, uint64_t seed, int t) {
    Rng rng(mix_seed(seed, 0xA000 + static_cast<uint64_t>(t)));
    Mat z(pixels, 3);
    for (int i = 0; i < pixels; ++i)
        for (int c = 0; c < 3; ++c) z(i, c) = rng.normal_f();
    return z;
}

// One denoising step for the whole batch with classifier-free guidance:
// cond and uncond branches run as one stacked forward.
void guided_step(DiffusionModel& model, std::vector<SampleState>& batch, int t, bool use_masks,
                 bool record) {
    const auto& cfg = model.config();
    const int S     = cfg.image_size;
    const int P     = S * S;
    const int B     = static_cast<int>(batch.size());

    Mat x_all(2 * B * P, 3);
    std::vector<int> tsteps(2 * B, t);
    std::vector<const Mat*> ys(2 * B);
    std::vector<const FocusMask*> masks(2 * B, nullptr);
    for (int s = 0; s < B; ++s) {
        x_all.middleRows(s * P, P)       = batch[s].x;
        x_all.middleRows((B + s) * P, P) = batch[s].x;
        ys[s]     = &batch[s].prompt->encoding;
        ys[B + s] = &model.uncond_encoding();
        if (use_masks && batch[s].mask) masks[s] = &*batch[s].mask;
    }

    Tape<float> tape;
    Binder<float> bind(tape);
    int x_node = tape.input(std::move(x_all));
    std::vector<std::vector<UNet<float>::AttentionTap>> taps;
    int eps_node = model.net().forward(tape, bind, x_node, tsteps, ys, use_masks ? &masks : nullptr,
                                       record ? &taps : nullptr);
    const Mat& eps_all = tape.val(eps_node);

    const auto& ab = model.schedule().alpha_bar;
    const float g  = cfg.guidance_scale;
    for (int s = 0; s < B; ++s) {
        Mat eps_c = eps_all.middleRows(s * P, P);
        Mat eps_u = eps_all.middleRows((B + s) * P, P);
        Mat eps   = eps_u + g * (eps_c - eps_u);

        if (record) {
            for (auto& tap : taps[s]) {
                AttentionEntry e;
                e.layer    = tap.layer;
                e.timestep = t;
                e.h = e.w = cfg.level_size(tap.level);
                e.map     = std::move(tap.probs);
                batch[s].record.entries.push_back(std::move(e));
            }
        }

        float ab_t  = ab[t];
        float ab_tm = ab[t - 1];
        Mat x0_hat  = (batch[s].x - std::sqrt(1.f - ab_t) * eps) / std::sqrt(ab_t);
        x0_hat      = x0_hat.cwiseMax(-1.f).cwiseMin(1.f);
        Mat eps_adj = (batch[s].x - std::sqrt(ab_t) * x0_hat) / std::sqrt(1.f - ab_t);

        if (cfg.sampler == "ddim") {
            batch[s].x = std::sqrt(ab_tm) * x0_hat + std::sqrt(1.f - ab_tm) * eps_adj;
        } else {  // ancestral
            float alpha_t = ab_t / ab_tm;
            float beta_t  = 1.f - alpha_t;
            Mat mean = (std::sqrt(ab_tm) * beta_t / (1.f - ab_t)) * x0_hat +
                       (std::sqrt(alpha_t) * (1.f - ab_tm) / (1.f - ab_t)) * batch[s].x;
            if (t > 1) {
                float var = (1.f - ab_tm) / (1.f - ab_t) * beta_t;
                mean += std::sqrt(var) * step_noise(P, batch[s].seed, t);
            }
            batch[s].x = std::move(mean);
        }
    }
}

}  // namespace

std::vector<GenerationResult> generate_batch(DiffusionModel& model, const std::vector<PromptBundle>& prompts,
                                             const std::vector<uint64_t>& seeds, const GenerateOptions& opts) {
    if (prompts.size() != seeds.size()) throw ParamError("generate: one seed per prompt required");
    if (prompts.empty()) return {};
    if (opts.early_stop_frac <= 0.f || opts.early_stop_frac > 1.f)
        throw ParamError("generate: early stop fraction must lie in (0, 1]");
    if (opts.mode == GenMode::Fca) {
        for (const auto& p : prompts)
            if (p.dep.n() != p.encoding.rows())
                throw ShapeError("generate: dependency matrix is " + std::to_string(p.dep.n()) +
                                 " tokens but the encoding has " + std::to_string(p.encoding.rows()) + " rows");
    }

    const auto& cfg = model.config();
    const int S     = cfg.image_size;
    const int P     = S * S;
    const int T     = cfg.timesteps;

    std::vector<SampleState> batch(prompts.size());
    for (size_t s = 0; s < prompts.size(); ++s) {
        batch[s].prompt = &prompts[s];
        batch[s].seed   = seeds[s];
        batch[s].x_T    = initial_noise(P, seeds[s]);
        batch[s].x      = batch[s].x_T;
    }

    if (opts.mode == GenMode::Fca) {
        // first traversal: standard attention, recorded, stopped early
        int record_steps = static_cast<int>(std::ceil(opts.early_stop_frac * T));
        for (int t = T; t > T - record_steps; --t) guided_step(model, batch, t, false, true);

        for (auto& s : batch) {
            AveragedAttention avg = aggregate_attention(s.record);
            s.mask = compute_focus_mask(avg, s.prompt->dep, opts.threshold);
        }

        // second traversal restarts from the same x_T with focused attention
        for (auto& s : batch) s.x = s.x_T;
        for (int t = T; t >= 1; --t) guided_step(model, batch, t, true, false);
    } else {
        for (int t = T; t >= 1; --t) guided_step(model, batch, t, false, opts.record_attention);
    }

    std::vector<GenerationResult> out(batch.size());
    for (size_t s = 0; s < batch.size(); ++s) {
        out[s].image  = Image::from_mat_pm1(batch[s].x, S, S);
        out[s].record = std::move(batch[s].record);
        out[s].mask   = std::move(batch[s].mask);
        out[s].seed   = batch[s].seed;
        out[s].config = cfg;
    }
    return out;
}

GenerationResult generate(DiffusionModel& model, const PromptBundle& prompt, uint64_t seed,
                          const GenerateOptions& opts) {
    auto v = generate_batch(model, {prompt}, {seed}, opts);
    return std::move(v[0]);
}

// --------------------------------------------------------------- training

std::vector<TrainLogEntry> train_toy_diffusion(DiffusionModel& model,
                                               const std::vector<DiffusionTrainSample>& dataset,
                                               const DiffusionTrainConfig& cfg) {
    if (dataset.empty()) throw DataError("diffusion training: empty dataset");
    if (cfg.batch % cfg.chunks != 0) throw ParamError("diffusion training: chunks must divide batch");

    const auto& dcfg = model.config();
    const int S      = dcfg.image_size;
    const int P      = S * S;
    const int T      = dcfg.timesteps;
    const int chunk  = cfg.batch / cfg.chunks;
    const auto& ab   = model.schedule().alpha_bar;

    AdamOptimizer<float> opt;
    opt.lr = cfg.lr;
    Rng rng(mix_seed(cfg.seed, 0x7e41));
    std::vector<TrainLogEntry> log;

    struct Prepared {
        Mat x_t;
        Mat eps;
        int t;
        const Mat* y;
    };

    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<Prepared> items(cfg.batch);
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& sample = dataset[rng.uniform_index(dataset.size())];
            Prepared& it       = items[b];
            it.t               = 1 + static_cast<int>(rng.uniform_index(T));
            it.y = rng.uniform() < cfg.cfg_dropout ? &model.uncond_encoding() : sample.encoding;
            it.eps = Mat(P, 3);
            for (int i = 0; i < P; ++i)
                for (int c = 0; c < 3; ++c) it.eps(i, c) = rng.normal_f();
            float a = ab[it.t];
            it.x_t  = std::sqrt(a) * sample.x0 + std::sqrt(1.f - a) * it.eps;
        }

        // fixed chunk count: forward/backward in parallel, gradients pulled
        // serially in chunk order so results do not depend on thread count
        std::vector<std::unique_ptr<Tape<float>>> tapes(cfg.chunks);
        std::vector<std::unique_ptr<Binder<float>>> binders(cfg.chunks);
        std::vector<float> losses(cfg.chunks, 0.f);

#pragma omp parallel for schedule(static)
        for (int c = 0; c < cfg.chunks; ++c) {
            tapes[c]   = std::make_unique<Tape<float>>();
            binders[c] = std::make_unique<Binder<float>>(*tapes[c]);
            Tape<float>& tape = *tapes[c];

            Mat x_all(chunk * P, 3);
            Mat eps_all(chunk * P, 3);
            std::vector<int> tsteps(chunk);
            std::vector<const Mat*> ys(chunk);
            for (int b = 0; b < chunk; ++b) {
                const Prepared& it = items[c * chunk + b];
                x_all.middleRows(b * P, P)   = it.x_t;
                eps_all.middleRows(b * P, P) = it.eps;
                tsteps[b] = it.t;
                ys[b]     = it.y;
            }
            int x_node   = tape.input(std::move(x_all));
            int eps_node = model.net().forward(tape, *binders[c], x_node, tsteps, ys, nullptr, nullptr);
            int loss = tape.mse(eps_node, eps_all);
            tape.backward(loss);
            losses[c] = tape.val(loss)(0, 0);
        }
        for (int c = 0; c < cfg.chunks; ++c) binders[c]->pull_grads();

        // chunk mse means average to the batch mean (equal chunk sizes) but
        // gradients are per-chunk means; rescale to the batch mean
        for (auto& p : model.store().all()) p.g /= static_cast<float>(cfg.chunks);
        opt.update(model.store());

        float loss = 0.f;
        for (float l : losses) loss += l;
        loss /= static_cast<float>(cfg.chunks);
        if (step % cfg.log_every == 0 || step + 1 == cfg.steps)
            log.push_back({step, loss});
    }
    return log;
}

// ------------------------------------------------------------ checkpoints

void DiffusionModel::save(const std::string& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    json meta;
    meta["kind"]   = "diffusion";
    meta["config"] = {{"image_size", cfg_.image_size}, {"channels", cfg_.channels},
                      {"attn_levels", cfg_.attn_levels}, {"heads", cfg_.heads},
                      {"text_dim", cfg_.text_dim},     {"temb_dim", cfg_.temb_dim},
                      {"timesteps", cfg_.timesteps},   {"schedule", cfg_.schedule},
                      {"guidance_scale", cfg_.guidance_scale}, {"sampler", cfg_.sampler}};
    meta["param_count"] = store_->scalar_count();
    meta["uncond_rows"] = uncond_.rows();
    atomic_write_text((fs::path(dir) / "manifest.json").string(), meta.dump(2));
    auto blob = store_->serialize();
    write_f32_file((fs::path(dir) / "params.f32").string(), blob.data(), blob.size());
    write_f32_mat((fs::path(dir) / "uncond.f32").string(), uncond_);
}

DiffusionModel DiffusionModel::load(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in) throw DataError("diffusion checkpoint: missing manifest.json in " + dir);
    json meta;
    try {
        in >> meta;
    } catch (const json::exception& e) {
        throw SchemaError(std::string("diffusion checkpoint manifest: ") + e.what());
    }
    if (meta.value("kind", std::string()) != "diffusion")
        throw SchemaError("checkpoint in " + dir + " is not a diffusion checkpoint");

    const auto& c = meta.at("config");
    DenoiserConfig cfg;
    cfg.image_size     = c.at("image_size").get<int>();
    cfg.channels       = c.at("channels").get<std::vector<int>>();
    cfg.attn_levels    = c.at("attn_levels").get<std::vector<int>>();
    cfg.heads          = c.at("heads").get<int>();
    cfg.text_dim       = c.at("text_dim").get<int>();
    cfg.temb_dim       = c.at("temb_dim").get<int>();
    cfg.timesteps      = c.at("timesteps").get<int>();
    cfg.schedule       = c.at("schedule").get<std::string>();
    cfg.guidance_scale = c.at("guidance_scale").get<float>();
    cfg.sampler        = c.at("sampler").get<std::string>();

    int uncond_rows = meta.at("uncond_rows").get<int>();
    Mat uncond = read_f32_mat((fs::path(dir) / "uncond.f32").string(), uncond_rows, cfg.text_dim);
    DiffusionModel model(cfg, uncond, 0);
    model.store_->deserialize(read_f32_file((fs::path(dir) / "params.f32").string()));
    return model;
}

}  // namespace synbind
