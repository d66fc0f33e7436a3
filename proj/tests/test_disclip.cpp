#include <doctest.h>

#include "synbind/clip.hpp"
#include "synbind/disclip.hpp"

using namespace synbind;

namespace {

std::shared_ptr<TextEncoderHandle> make_handle() {
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
    static auto clip = std::make_shared<ClipModel>(cfg, 21);
    return clip->frozen_text();
}

}  // namespace

TEST_CASE("disclip concatenates whole prompt and constituent encodings") {
    auto handle = make_handle();
    auto r      = parse_prompt_template("a red car and a blue bird");
    auto at     = abstract_constituency_tree(r.tree, r.prompt);
    auto enc    = encode_disclip(r.prompt, at, *handle);

    // 8 tokens (7 words + eos) + two 3-token constituents
    CHECK(r.prompt.n() == 8);
    CHECK(enc.n() == 8 + 3 + 3);
    REQUIRE(enc.segments.size() == 3);
    CHECK(enc.segments[0].source == -1);
    CHECK(enc.segments[0].range == std::pair<int, int>{0, 8});
    CHECK(enc.segments[1].range == std::pair<int, int>{8, 11});
    CHECK(enc.segments[2].range == std::pair<int, int>{11, 14});
    CHECK(enc.token_strings.size() == 14);
    CHECK(enc.token_strings[7] == "<eos>");
    CHECK(enc.token_strings[8] == "a");
    CHECK(enc.token_strings[10] == "car");
    CHECK(enc.token_strings[13] == "bird");

    SUBCASE("whole-prompt segment equals the plain encoding") {
        auto plain = handle->encode(r.prompt.tokens);
        CHECK((enc.embeddings.topRows(8) - plain.rows).cwiseAbs().maxCoeff() == 0.f);
    }

    SUBCASE("constituent rows come from independent encodes") {
        std::vector<int> ids = {r.prompt.tokens[0], r.prompt.tokens[1], r.prompt.tokens[2],
                                Vocabulary::builtin().eos_id()};
        auto sub = handle->encode(ids);
        CHECK((enc.embeddings.middleRows(8, 3) - sub.rows.topRows(3)).cwiseAbs().maxCoeff() == 0.f);
    }
}

TEST_CASE("disclip with no constituents reduces to the plain encoding") {
    auto handle = make_handle();
    // a tree with no noun phrases at all
    const auto& vocab = Vocabulary::builtin();
    auto prompt = tokenize_words({"red", "and", "blue"}, vocab);
    TreeNode root;
    root.label      = NodeLabel::Sentence;
    root.span_begin = 0;
    root.span_end   = 3;
    for (int w = 0; w < 3; ++w) {
        TreeNode leaf;
        leaf.span_begin = w;
        leaf.span_end   = w + 1;
        root.children.push_back(leaf);
    }
    auto at  = abstract_constituency_tree(ConstituencyTree{root}, prompt);
    auto enc = encode_disclip(prompt, at, *handle);
    auto plain = handle->encode(prompt.tokens);
    CHECK(enc.n() == prompt.n());
    CHECK((enc.embeddings - plain.rows).cwiseAbs().maxCoeff() == 0.f);

    // and the extended matrix is exactly D
    DependencyMatrix d;
    d.d = Mat::Zero(prompt.n(), prompt.n());
    d.d(0, 2) = 1.f;
    auto ext = extend_dependency_matrix(d, enc, extract_constituents(at));
    CHECK(ext.n() == d.n());
    CHECK((ext.d - d.d).cwiseAbs().maxCoeff() == 0.f);
}

TEST_CASE("extended dependency matrix keeps the original block and ties constituents to nouns") {
    auto handle = make_handle();
    auto r      = parse_prompt_template("a red car and a blue bird");
    auto at     = abstract_constituency_tree(r.tree, r.prompt);
    auto cons   = extract_constituents(at);
    auto enc    = encode_disclip(r.prompt, at, *handle);
    auto d      = build_dependency_matrix(r.parse);
    auto ext    = extend_dependency_matrix(d, enc, cons);
    ext.validate();

    CHECK(ext.n() == enc.n());
    CHECK((ext.d.topLeftCorner(d.n(), d.n()) - d.d).cwiseAbs().maxCoeff() == 0.f);

    // constituent rows depend exactly on their own head-noun tokens
    for (size_t ci = 0; ci < cons.size(); ++ci) {
        const auto& seg = enc.segments[ci + 1];
        for (int row = seg.range.first; row < seg.range.second; ++row) {
            for (int col = 0; col < ext.n(); ++col) {
                bool expected = false;
                for (int noun : cons[ci].noun_token_positions) expected = expected || col == noun;
                CHECK(ext.d(row, col) == (expected ? 1.f : 0.f));
            }
        }
    }

    // the two constituents share no noun columns
    auto& c0 = cons[0].noun_token_positions;
    auto& c1 = cons[1].noun_token_positions;
    for (int a : c0)
        for (int b : c1) CHECK(a != b);

    SUBCASE("noun position outside the whole-prompt segment fails") {
        auto bad = cons;
        bad[0].noun_token_positions = {d.n() + 1};
        CHECK_THROWS_AS(extend_dependency_matrix(d, enc, bad), ShapeError);
    }

    SUBCASE("width mismatch fails") {
        DependencyMatrix small;
        small.d = Mat::Zero(3, 3);
        CHECK_THROWS_AS(extend_dependency_matrix(small, enc, cons), ShapeError);
    }
}

TEST_CASE("empty constituent token range is rejected") {
    auto handle = make_handle();
    auto r  = parse_prompt_template("a red car");
    auto at = abstract_constituency_tree(r.tree, r.prompt);
    at.minimal_nps[0].word_span = {0, 0};  // force an empty span
    CHECK_THROWS(encode_disclip(r.prompt, at, *handle));
}
