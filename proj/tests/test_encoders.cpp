#include <doctest.h>

#include <filesystem>

#include "synbind/benchgen.hpp"
#include "synbind/clip.hpp"
#include "synbind/syntax.hpp"

using namespace synbind;

namespace {

ClipConfig tiny_clip_config() {
    ClipConfig cfg;
    cfg.text.vocab_size = Vocabulary::builtin().size();
    cfg.text.dim        = 32;
    cfg.text.heads      = 2;
    cfg.text.layers     = 1;
    cfg.text.max_len    = 24;
    cfg.text.joint_dim  = 32;
    cfg.vision.image_size = 32;
    cfg.vision.patch      = 8;
    cfg.vision.dim        = 32;
    cfg.vision.heads      = 2;
    cfg.vision.layers     = 1;
    cfg.vision.joint_dim  = 32;
    return cfg;
}

}  // namespace

TEST_CASE("text encoder adapter contract") {
    ClipModel clip(tiny_clip_config(), 7);
    auto handle = clip.frozen_text();

    auto prompt = parse_prompt_template("red square and blue circle.").prompt;
    auto emb    = handle->encode(prompt.tokens);
    CHECK(emb.rows.rows() == prompt.n());
    CHECK(emb.rows.cols() == handle->dim());
    CHECK(emb.eos_row == prompt.n() - 1);

    SUBCASE("deterministic") {
        auto emb2 = handle->encode(prompt.tokens);
        CHECK((emb.rows - emb2.rows).cwiseAbs().maxCoeff() == 0.f);
    }

    SUBCASE("causal: prefix features ignore suffix changes") {
        auto p2 = parse_prompt_template("red square and blue cross.").prompt;
        REQUIRE(p2.n() == prompt.n());
        auto emb2 = handle->encode(p2.tokens);
        int diverge = prompt.word_to_tokens[3].second;  // tokens after "and" differ
        CHECK((emb.rows.topRows(diverge + 1) - emb2.rows.topRows(diverge + 1)).cwiseAbs().maxCoeff() == 0.f);
    }

    SUBCASE("rejects out-of-range input") {
        CHECK_THROWS_AS(handle->encode(std::vector<int>(30, 1)), ShapeError);  // beyond max_len
        CHECK_THROWS_AS(handle->encode({99999}), DataError);
        CHECK_THROWS_AS(handle->encode({}), ParamError);
    }

    SUBCASE("pooled embedding has the joint width") {
        auto v = handle->pooled(prompt.tokens);
        CHECK(v.size() == 32);
    }
}

TEST_CASE("contrastive training pulls matched pairs together") {
    ShapesVocab vocab;
    auto samples = synth_shapes_dataset(vocab, 64, 99);
    ClipModel clip(tiny_clip_config(), 8);
    AdamOptimizer<float> opt;
    opt.lr = 2e-3f;

    std::vector<std::vector<int>> tokens;
    for (const auto& s : samples) tokens.push_back(parse_prompt_template(s.caption).prompt.tokens);

    Rng rng(77);
    auto run_batch = [&](bool train) {
        std::vector<const Image*> imgs;
        std::vector<const std::vector<int>*> caps;
        std::vector<int> idx;
        while (idx.size() < 16) {
            int i = static_cast<int>(rng.uniform_index(samples.size()));
            bool dup = false;
            for (int j : idx) dup = dup || samples[j].caption == samples[i].caption;
            if (!dup) idx.push_back(i);
        }
        for (int i : idx) {
            imgs.push_back(&samples[i].image);
            caps.push_back(&tokens[i]);
        }
        if (!train) return 0.f;
        return clip.train_step(imgs, caps, opt);
    };

    float first = 0.f, last = 0.f;
    for (int step = 0; step < 60; ++step) {
        float loss = run_batch(true);
        if (step == 0) first = loss;
        last = loss;
    }
    CHECK(last < first);

    SUBCASE("checkpoint round trip preserves similarities") {
        auto dir = std::filesystem::temp_directory_path() / "synbind_clip_test";
        std::filesystem::remove_all(dir);
        clip.save(dir.string());
        auto back = ClipModel::load(dir.string());
        float a = clip.similarity(samples[0].image, tokens[0]);
        float b = back.similarity(samples[0].image, tokens[0]);
        CHECK(a == doctest::Approx(b).epsilon(1e-6));
    }
}
