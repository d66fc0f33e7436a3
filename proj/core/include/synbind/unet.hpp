#pragma once

#include <string>
#include <vector>

#include "synbind/focus.hpp"
#include "synbind/nn.hpp"

namespace synbind {

// Three-level pixel-space denoiser: level i runs at image_size >> i with
// channels[i]. Cross-attention sits at the levels listed in attn_levels
// (encoder and decoder share the level list; the middle block always
// attends when its level is listed).
struct DenoiserConfig {
    int image_size            = 32;
    std::vector<int> channels = {16, 32, 48};
    std::vector<int> attn_levels = {1, 2};
    int heads          = 2;
    int text_dim       = 64;
    int temb_dim       = 64;
    int timesteps      = 50;
    std::string schedule = "cosine";
    float guidance_scale = 7.5f;
    std::string sampler  = "ddim";  // "ddim" | "ancestral"

    void validate() const {
        if (timesteps < 1) throw ParamError("denoiser: timesteps must be >= 1");
        if (guidance_scale < 0.f) throw ParamError("denoiser: guidance scale must be >= 0");
        if (channels.size() != 3) throw ParamError("denoiser: exactly three resolution levels supported");
        if (image_size % 4 != 0) throw ParamError("denoiser: image size must be divisible by 4");
        for (int l : attn_levels)
            if (l < 1 || l > 2) throw ParamError("denoiser: attention levels must be 1 or 2");
        if (attn_levels.empty()) throw ParamError("denoiser: at least one attention level required");
        if (sampler != "ddim" && sampler != "ancestral")
            throw ParamError("denoiser: unknown sampler '" + sampler + "'");
        for (size_t i = 0; i < channels.size(); ++i)
            if (channels[i] % heads != 0)
                throw ParamError("denoiser: heads must divide every channel width");
    }

    bool has_attn(int level) const {
        for (int l : attn_levels)
            if (l == level) return true;
        return false;
    }

    // (layer id, level) for every cross-attention layer, in forward order
    std::vector<std::pair<int, int>> attention_layers() const {
        std::vector<std::pair<int, int>> out;
        int id = 0;
        if (has_attn(1)) out.push_back({id++, 1});
        if (has_attn(2)) out.push_back({id++, 2});
        if (has_attn(2)) out.push_back({id++, 2});  // middle block
        if (has_attn(1)) out.push_back({id++, 1});
        return out;
    }

    int level_size(int level) const { return image_size >> level; }

    // side length of the largest cross-attention grid (where A* lives)
    int largest_attn_size() const {
        int best = 0;
        for (auto [id, level] : attention_layers()) best = std::max(best, level_size(level));
        return best;
    }
};

template <class T>
struct ResBlock {
    LayerNorm<T> ln1, ln2;
    Conv2d<T> conv1, conv2, skip;
    Linear<T> temb_lin;
    bool has_skip = false;
    int cout      = 0;

    ResBlock() = default;
    ResBlock(ParamStore<T>& ps, const std::string& name, int cin, int cout_, int temb_dim, Rng& rng)
        : cout(cout_) {
        ln1      = LayerNorm<T>(ps, name + ".ln1", cin);
        conv1    = Conv2d<T>(ps, name + ".conv1", cin, cout_, rng);
        temb_lin = Linear<T>(ps, name + ".temb", temb_dim, 2 * cout_, rng);
        ln2      = LayerNorm<T>(ps, name + ".ln2", cout_);
        conv2    = Conv2d<T>(ps, name + ".conv2", cout_, cout_, rng);
        if (cin != cout_) {
            skip     = Conv2d<T>(ps, name + ".skip", cin, cout_, rng, /*k=*/1);
            has_skip = true;
        }
    }

    int forward(Tape<T>& t, Binder<T>& bind, int x, int temb, int batch, int h, int w) const {
        int hid = conv1.forward(t, bind, t.silu(ln1.forward(t, bind, x)), batch, h, w);
        int emb = temb_lin.forward(t, bind, t.silu(temb));
        int sc  = t.slice_cols(emb, 0, cout);
        int sh  = t.slice_cols(emb, cout, cout);
        hid     = t.film(ln2.forward(t, bind, hid), sc, sh, h * w);
        hid     = conv2.forward(t, bind, t.silu(hid), batch, h, w);
        int res = has_skip ? skip.forward(t, bind, x, batch, h, w) : x;
        return t.add(res, hid);
    }
};

// Cross-attention plus a small feed-forward, applied per sample so every
// sample can carry its own conditioning width and focus mask.
template <class T>
struct CrossAttnBlock {
    LayerNorm<T> ln_q, ln_ff;
    MultiheadAttention<T> attn;
    Linear<T> fc1, fc2;

    CrossAttnBlock() = default;
    CrossAttnBlock(ParamStore<T>& ps, const std::string& name, int dim, int text_dim, int heads, Rng& rng) {
        ln_q = LayerNorm<T>(ps, name + ".ln_q", dim);
        attn = MultiheadAttention<T>(ps, name + ".attn", dim, text_dim, heads, rng);
        ln_ff = LayerNorm<T>(ps, name + ".ln_ff", dim);
        fc1   = Linear<T>(ps, name + ".fc1", dim, 2 * dim, rng);
        fc2   = Linear<T>(ps, name + ".fc2", 2 * dim, dim, rng);
    }

    // y_nodes: per-sample conditioning nodes; masks: per-sample additive
    // mask (pixels x n_s) or nullptr; probs_out: per-sample head-averaged
    // attention, written when non-null
    int forward(Tape<T>& t, Binder<T>& bind, int x, int batch, int pixels,
                const std::vector<int>& y_nodes, const std::vector<const MatT<T>*>& masks,
                std::vector<MatT<T>>* probs_out) const {
        int nx = ln_q.forward(t, bind, x);
        std::vector<int> parts;
        for (int s = 0; s < batch; ++s) {
            int q = t.slice_rows(nx, s * pixels, pixels);
            MatT<T> probs;
            int o = attn.forward(t, bind, q, y_nodes[s], masks[s],
                                 probs_out ? &probs : nullptr);
            if (probs_out) (*probs_out)[s] = std::move(probs);
            parts.push_back(o);
        }
        x     = t.add(x, t.concat_rows(parts));
        int m = fc2.forward(t, bind, t.silu(fc1.forward(t, bind, ln_ff.forward(t, bind, x))));
        return t.add(x, m);
    }
};

template <class T>
class UNet {
public:
    // per-sample, per-attention-layer head-averaged probabilities
    struct AttentionTap {
        int layer = 0;
        int level = 0;
        MatT<T> probs;  // (pixels at level) x n_sample
    };

    UNet(const DenoiserConfig& cfg, ParamStore<T>& ps, Rng& rng) : cfg_(cfg) {
        cfg.validate();
        const auto& ch = cfg.channels;
        conv_in_  = Conv2d<T>(ps, "unet.conv_in", 3, ch[0], rng);
        temb_fc1_ = Linear<T>(ps, "unet.temb_fc1", cfg.temb_dim, cfg.temb_dim, rng);
        temb_fc2_ = Linear<T>(ps, "unet.temb_fc2", cfg.temb_dim, cfg.temb_dim, rng);
        enc0_     = ResBlock<T>(ps, "unet.enc0", ch[0], ch[0], cfg.temb_dim, rng);
        down1_    = Conv2d<T>(ps, "unet.down1", ch[0], ch[1], rng, 3, 2);
        enc1_     = ResBlock<T>(ps, "unet.enc1", ch[1], ch[1], cfg.temb_dim, rng);
        if (cfg.has_attn(1)) attn_enc1_ = CrossAttnBlock<T>(ps, "unet.attn_enc1", ch[1], cfg.text_dim, cfg.heads, rng);
        down2_ = Conv2d<T>(ps, "unet.down2", ch[1], ch[2], rng, 3, 2);
        enc2_  = ResBlock<T>(ps, "unet.enc2", ch[2], ch[2], cfg.temb_dim, rng);
        if (cfg.has_attn(2)) attn_enc2_ = CrossAttnBlock<T>(ps, "unet.attn_enc2", ch[2], cfg.text_dim, cfg.heads, rng);
        mid1_ = ResBlock<T>(ps, "unet.mid1", ch[2], ch[2], cfg.temb_dim, rng);
        if (cfg.has_attn(2)) attn_mid_ = CrossAttnBlock<T>(ps, "unet.attn_mid", ch[2], cfg.text_dim, cfg.heads, rng);
        mid2_ = ResBlock<T>(ps, "unet.mid2", ch[2], ch[2], cfg.temb_dim, rng);
        up1_  = Conv2d<T>(ps, "unet.up1", ch[2], ch[1], rng);
        dec1_ = ResBlock<T>(ps, "unet.dec1", 2 * ch[1], ch[1], cfg.temb_dim, rng);
        if (cfg.has_attn(1)) attn_dec1_ = CrossAttnBlock<T>(ps, "unet.attn_dec1", ch[1], cfg.text_dim, cfg.heads, rng);
        up0_  = Conv2d<T>(ps, "unet.up0", ch[1], ch[0], rng);
        dec0_ = ResBlock<T>(ps, "unet.dec0", 2 * ch[0], ch[0], cfg.temb_dim, rng);
        ln_out_   = LayerNorm<T>(ps, "unet.ln_out", ch[0]);
        conv_out_ = Conv2d<T>(ps, "unet.conv_out", ch[0], 3, rng);
        // start near the identity so early training is stable
        conv_out_.w->w *= T(0.1);
    }

    const DenoiserConfig& config() const { return cfg_; }

    // x: (batch * S * S) x 3 noised pixels; y: per-sample conditioning
    // matrices (n_s x text_dim); masks: optional per-sample focus masks at
    // the largest attention resolution (projected per layer in here);
    // taps: optional per-sample attention recording sink.
    int forward(Tape<T>& t, Binder<T>& bind, int x, const std::vector<int>& tsteps,
                const std::vector<const Mat*>& y, const std::vector<const FocusMask*>* masks,
                std::vector<std::vector<AttentionTap>>* taps) const {
        const int batch = static_cast<int>(tsteps.size());
        const int S     = cfg_.image_size;
        if (t.val(x).rows() != static_cast<Eigen::Index>(batch) * S * S)
            throw ShapeError("unet: pixel rows do not match batch * image_size^2");
        if (static_cast<int>(y.size()) != batch) throw ShapeError("unet: one conditioning matrix per sample");
        for (int s = 0; s < batch; ++s)
            if (y[s]->cols() != cfg_.text_dim)
                throw ShapeError("unet: conditioning width " + std::to_string(y[s]->cols()) +
                                 " does not match text_dim " + std::to_string(cfg_.text_dim));
        if (masks) {
            const int as = cfg_.largest_attn_size();
            for (int s = 0; s < batch; ++s) {
                const FocusMask* fm = (*masks)[s];
                if (!fm) continue;
                if (fm->h != as || fm->w != as)
                    throw ShapeError("unet: focus mask must be at the largest attention grid");
                if (fm->mask.cols() != y[s]->rows())
                    throw ShapeError("unet: focus mask token count " + std::to_string(fm->mask.cols()) +
                                     " does not match encoding rows " + std::to_string(y[s]->rows()));
            }
        }
        if (taps) taps->assign(batch, {});

        // conditioning nodes shared by every attention layer
        std::vector<int> y_nodes(batch);
        for (int s = 0; s < batch; ++s) y_nodes[s] = t.input(y[s]->template cast<T>());

        int temb = t.input(sinusoidal_embedding<T>(tsteps, cfg_.temb_dim));
        temb     = temb_fc2_.forward(t, bind, t.silu(temb_fc1_.forward(t, bind, temb)));

        int layer_id = 0;
        auto run_attn = [&](const CrossAttnBlock<T>& block, int h, int level) {
            // per-sample additive masks at this layer's grid
            int side = cfg_.level_size(level);
            std::vector<MatT<T>> mask_store(batch);
            std::vector<const MatT<T>*> mask_ptrs(batch, nullptr);
            if (masks) {
                for (int s = 0; s < batch; ++s) {
                    const FocusMask* fm = (*masks)[s];
                    if (!fm) continue;
                    FocusMask proj = project_mask(*fm, side, side);
                    mask_store[s]  = proj.mask.template cast<T>();
                    mask_ptrs[s]   = &mask_store[s];
                }
            }
            std::vector<MatT<T>> probs(batch);
            int out = block.forward(t, bind, h, batch, side * side, y_nodes, mask_ptrs,
                                    taps ? &probs : nullptr);
            if (taps)
                for (int s = 0; s < batch; ++s)
                    (*taps)[s].push_back({layer_id, level, std::move(probs[s])});
            ++layer_id;
            return out;
        };

        const auto& ch = cfg_.channels;
        (void)ch;
        int h0 = conv_in_.forward(t, bind, x, batch, S, S);
        h0     = enc0_.forward(t, bind, h0, temb, batch, S, S);

        int h1 = down1_.forward(t, bind, h0, batch, S, S);
        h1     = enc1_.forward(t, bind, h1, temb, batch, S / 2, S / 2);
        if (cfg_.has_attn(1)) h1 = run_attn(attn_enc1_, h1, 1);

        int h2 = down2_.forward(t, bind, h1, batch, S / 2, S / 2);
        h2     = enc2_.forward(t, bind, h2, temb, batch, S / 4, S / 4);
        if (cfg_.has_attn(2)) h2 = run_attn(attn_enc2_, h2, 2);

        int m = mid1_.forward(t, bind, h2, temb, batch, S / 4, S / 4);
        if (cfg_.has_attn(2)) m = run_attn(attn_mid_, m, 2);
        m = mid2_.forward(t, bind, m, temb, batch, S / 4, S / 4);

        int u1 = up1_.forward(t, bind, t.upsample2x(m, batch, S / 4, S / 4), batch, S / 2, S / 2);
        u1     = dec1_.forward(t, bind, t.concat_cols({u1, h1}), temb, batch, S / 2, S / 2);
        if (cfg_.has_attn(1)) u1 = run_attn(attn_dec1_, u1, 1);

        int u0 = up0_.forward(t, bind, t.upsample2x(u1, batch, S / 2, S / 2), batch, S, S);
        u0     = dec0_.forward(t, bind, t.concat_cols({u0, h0}), temb, batch, S, S);

        return conv_out_.forward(t, bind, t.silu(ln_out_.forward(t, bind, u0)), batch, S, S);
    }

private:
    DenoiserConfig cfg_;
    Conv2d<T> conv_in_, down1_, down2_, up1_, up0_, conv_out_;
    Linear<T> temb_fc1_, temb_fc2_;
    ResBlock<T> enc0_, enc1_, enc2_, mid1_, mid2_, dec1_, dec0_;
    CrossAttnBlock<T> attn_enc1_, attn_enc2_, attn_mid_, attn_dec1_;
    LayerNorm<T> ln_out_;
};

}  // namespace synbind
