#include <doctest.h>

#include <set>

#include "synbind/syntax.hpp"

using namespace synbind;

namespace {

std::set<std::pair<std::string, std::string>> edge_words(const ParseResult& r) {
    std::set<std::pair<std::string, std::string>> out;
    for (const auto& e : r.parse.edges)
        out.insert({r.prompt.words[e.dep], r.prompt.words[e.head]});
    return out;
}

// Independent word-level expansion: walk the kept edges and mark the full
// cross product of word token ranges, without going through the matrix
// builder's loops.
Mat expansion_oracle(const ParseResult& r, const std::set<std::string>& keep) {
    const auto& tp = r.prompt;
    Mat d = Mat::Zero(tp.n(), tp.n());
    for (const auto& e : r.parse.edges) {
        if (!keep.count(e.rel)) continue;
        for (int j = tp.word_to_tokens[e.dep].first; j < tp.word_to_tokens[e.dep].second; ++j)
            for (int k = tp.word_to_tokens[e.head].first; k < tp.word_to_tokens[e.head].second; ++k)
                if (j != k) d(j, k) = 1.f;
    }
    return d;
}

}  // namespace

TEST_CASE("tokenizer splits words greedily and keeps coverage invariants") {
    const auto& vocab = Vocabulary::builtin();
    CHECK(vocab.encode_word("red").size() == 1);
    auto golden = vocab.encode_word("golden");
    CHECK(golden.size() == 2);  // gold + en
    CHECK(vocab.piece(golden[0]) == "gold");
    CHECK(vocab.piece(golden[1]) == "en");
    // arbitrary lowercase words fall back to letter pieces
    CHECK(vocab.encode_word("zebra").size() >= 2);
    CHECK_THROWS_AS(vocab.encode_word("caf3"), ParseError);
    CHECK_THROWS_AS(vocab.encode_word(""), ParseError);

    auto tp = tokenize_words({"a", "golden", "car"}, vocab);
    tp.validate();
    CHECK(tp.n() == 5);  // a, gold, en, car, <eos>
    CHECK(tp.word_to_tokens[1] == std::pair<int, int>{1, 3});
}

TEST_CASE("template backend parses the coordinated pattern") {
    auto r = parse_prompt_template("a red car and a blue bird");
    CHECK(edge_words(r) == std::set<std::pair<std::string, std::string>>{{"red", "car"}, {"blue", "bird"}});
    for (const auto& e : r.parse.edges) CHECK(e.rel == "amod");

    // noun phrases: "a red car" and "a blue bird"
    auto at = abstract_constituency_tree(r.tree, r.prompt);
    REQUIRE(at.minimal_nps.size() == 2);
    CHECK(at.minimal_nps[0].word_span == std::pair<int, int>{0, 3});
    CHECK(at.minimal_nps[1].word_span == std::pair<int, int>{4, 7});
    CHECK(r.prompt.words[at.minimal_nps[0].head_word] == "car");
    CHECK(r.prompt.words[at.minimal_nps[1].head_word] == "bird");
}

TEST_CASE("template backend handles the attribute benchmark sentence") {
    auto r = parse_prompt_template("yellow grass and silver fence");
    CHECK(edge_words(r) == std::set<std::pair<std::string, std::string>>{{"yellow", "grass"}, {"silver", "fence"}});
    // capitalization folds away
    auto r2 = parse_prompt_template("Silver grass and yellow fence.");
    CHECK(edge_words(r2) == std::set<std::pair<std::string, std::string>>{{"silver", "grass"}, {"yellow", "fence"}});
}

TEST_CASE("template backend rejects sentences outside the pattern") {
    CHECK_THROWS_AS(parse_prompt_template(""), ParseError);
    CHECK_THROWS_AS(parse_prompt_template("and"), ParseError);
    CHECK_THROWS_AS(parse_prompt_template("a red car and"), ParseError);
    CHECK_THROWS_AS(parse_prompt_template("a car and a dog and a bird"), ParseError);
    CHECK_THROWS_AS(parse_prompt_template("the"), ParseError);  // article with no noun
}

TEST_CASE("parse json round trips and validates") {
    auto r = parse_prompt_template("a golden car and a red watch.");
    auto text = save_parse_json(r);
    auto r2   = load_parse_json(text);
    CHECK(r2.prompt.words == r.prompt.words);
    CHECK(r2.prompt.tokens == r.prompt.tokens);
    CHECK(r2.parse.edges.size() == r.parse.edges.size());
    CHECK(save_parse_json(r2) == text);  // pass-through is verbatim

    CHECK_THROWS_AS(load_parse_json("{"), SchemaError);
    CHECK_THROWS_WITH_AS(load_parse_json(R"({"tokens":[0],"word_to_tokens":[],"dependencies":[],"constituency":{}})"),
                         "parse file: missing field 'words'", SchemaError);
    // out-of-bounds span is named
    auto bad = R"({"words":["car"],"tokens":[30,0],"word_to_tokens":[[0,1]],"dependencies":[],
                   "constituency":{"label":"sentence","span":[0,5],"children":[{"span":[0,1]}]}})";
    CHECK_THROWS_AS(load_parse_json(bad), SchemaError);
}

TEST_CASE("dependency matrix expands word edges over subword tokens") {
    const auto& vocab = Vocabulary::builtin();

    SUBCASE("single modifier edge") {
        ParseResult r;
        r.prompt = tokenize_words({"a", "red", "car"}, vocab);
        r.parse.tokens = r.prompt;
        r.parse.edges.push_back({1, 2, "amod"});
        auto dm = build_dependency_matrix(r.parse);
        dm.validate();
        CHECK(dm.n() == 4);
        CHECK(dm.d(1, 2) == 1.f);
        CHECK(dm.d.sum() == 1.f);
    }

    SUBCASE("no kept edges gives the zero matrix") {
        auto r  = parse_prompt_template("a red car and a blue bird");
        auto dm = build_dependency_matrix(r.parse, {"nsubj"});
        CHECK(dm.d.sum() == 0.f);
    }

    SUBCASE("multi-subword modifier marks every subword row") {
        auto r  = parse_prompt_template("a golden car and a red watch");
        auto dm = build_dependency_matrix(r.parse);
        dm.validate();
        Mat expected = expansion_oracle(r, kDefaultKeepRelations);
        CHECK((dm.d - expected).cwiseAbs().maxCoeff() == 0.f);
        // golden = gold+en: both rows point at car's token
        auto [gb, ge] = r.prompt.word_to_tokens[1];
        auto [cb, ce] = r.prompt.word_to_tokens[2];
        CHECK(ge - gb == 2);
        for (int j = gb; j < ge; ++j)
            for (int k = cb; k < ce; ++k) CHECK(dm.d(j, k) == 1.f);
    }
}

TEST_CASE("abstraction replaces dominated noun phrases by head nouns") {
    SUBCASE("coordinated sentence") {
        auto r  = parse_prompt_template("a golden car and a red watch");
        auto at = abstract_constituency_tree(r.tree, r.prompt);
        // kept constituents: two minimal noun phrases plus the sentence
        auto kept = at.kept_constituents();
        REQUIRE(kept.size() == 3);
        CHECK(kept[0] == std::pair<int, int>{0, 3});
        CHECK(kept[1] == std::pair<int, int>{4, 7});
        CHECK(kept[2] == std::pair<int, int>{0, 7});
        // abstracted yield: "car and watch"
        std::vector<std::string> yield;
        for (int w : at.surviving_words) yield.push_back(r.prompt.words[w]);
        CHECK(yield == std::vector<std::string>{"car", "and", "watch"});
        // removed words recorded for audit
        std::set<int> removed;
        for (const auto& rec : at.removals)
            removed.insert(rec.removed_words.begin(), rec.removed_words.end());
        CHECK(removed == std::set<int>{0, 1, 4, 5});
    }

    SUBCASE("single noun phrase is untouched") {
        auto r  = parse_prompt_template("a red car");
        auto at = abstract_constituency_tree(r.tree, r.prompt);
        CHECK(at.removals.empty());
        CHECK(at.surviving_words.size() == r.prompt.words.size());
        auto kept = at.kept_constituents();
        REQUIRE(kept.size() == 2);
        CHECK(kept[0] == std::pair<int, int>{0, 3});
        CHECK(kept[1] == std::pair<int, int>{0, 3});
    }

    SUBCASE("noun phrase inside a prepositional phrase") {
        // "the cat in the red hat": only the NP-dominating-NP replacement
        // happens; the preposition survives
        const auto& vocab = Vocabulary::builtin();
        auto prompt       = tokenize_words({"the", "cat", "in", "the", "red", "hat"}, vocab);
        auto leaf = [](int w) {
            TreeNode n;
            n.span_begin = w;
            n.span_end   = w + 1;
            return n;
        };
        TreeNode np_inner;
        np_inner.label      = NodeLabel::NounPhrase;
        np_inner.span_begin = 3;
        np_inner.span_end   = 6;
        np_inner.head_word  = 5;
        np_inner.children   = {leaf(3), leaf(4), leaf(5)};
        TreeNode pp;
        pp.span_begin = 2;
        pp.span_end   = 6;
        pp.children   = {leaf(2), np_inner};
        TreeNode np_outer;
        np_outer.label      = NodeLabel::NounPhrase;
        np_outer.span_begin = 0;
        np_outer.span_end   = 6;
        np_outer.head_word  = 1;
        np_outer.children   = {leaf(0), leaf(1), pp};
        TreeNode root;
        root.label      = NodeLabel::Sentence;
        root.span_begin = 0;
        root.span_end   = 6;
        root.children   = {np_outer};
        ConstituencyTree tree{root};
        tree.validate();

        auto at = abstract_constituency_tree(tree, prompt);
        std::vector<std::string> yield;
        for (int w : at.surviving_words) yield.push_back(prompt.words[w]);
        CHECK(yield == std::vector<std::string>{"the", "cat", "in", "hat"});
        REQUIRE(at.minimal_nps.size() == 1);
        CHECK(at.minimal_nps[0].word_span == std::pair<int, int>{3, 6});
        // the prepositional node is still there: outer NP -> [the, cat, PP]
        const TreeNode& outer = at.base.root.children[0];
        REQUIRE(outer.children.size() == 3);
        CHECK(outer.children[2].children.size() == 2);  // "in" + head leaf
    }

    SUBCASE("abstraction is idempotent on its own output") {
        auto r  = parse_prompt_template("a golden car and a red watch.");
        auto at = abstract_constituency_tree(r.tree, r.prompt);
        std::vector<std::string> words;
        for (int w : at.surviving_words) words.push_back(r.prompt.words[w]);
        auto prompt2 = tokenize_words(words, Vocabulary::builtin());
        auto at2     = abstract_constituency_tree(at.base, prompt2);
        CHECK(at2.removals.empty());
        CHECK(save_parse_json({prompt2, {{}, prompt2}, at2.base}) ==
              save_parse_json({prompt2, {{}, prompt2}, at.base}));
    }

    SUBCASE("noun phrase without a head noun fails loudly") {
        const auto& vocab = Vocabulary::builtin();
        auto prompt       = tokenize_words({"the", "and"}, vocab);
        auto leaf = [](int w) {
            TreeNode n;
            n.span_begin = w;
            n.span_end   = w + 1;
            return n;
        };
        TreeNode np;
        np.label      = NodeLabel::NounPhrase;
        np.span_begin = 0;
        np.span_end   = 2;
        np.children   = {leaf(0), leaf(1)};  // only function words, no head
        TreeNode root;
        root.label      = NodeLabel::Sentence;
        root.span_begin = 0;
        root.span_end   = 2;
        root.children   = {np};
        CHECK_THROWS_AS(abstract_constituency_tree(ConstituencyTree{root}, prompt), AbstractionError);
    }
}

TEST_CASE("extract_constituents reports token spans and noun positions") {
    auto r  = parse_prompt_template("a red car and a blue bird");
    auto at = abstract_constituency_tree(r.tree, r.prompt);
    auto cs = extract_constituents(at);
    REQUIRE(cs.size() == 2);
    CHECK(cs[0].token_span == std::pair<int, int>{0, 3});
    CHECK(cs[1].token_span == std::pair<int, int>{4, 7});  // token 3 is "and"
    CHECK(cs[0].noun_token_positions == std::vector<int>{2});  // "car"
    CHECK(cs[1].noun_token_positions == std::vector<int>{6});  // "bird"

    SUBCASE("single noun phrase yields one constituent") {
        auto r1  = parse_prompt_template("a red car");
        auto at1 = abstract_constituency_tree(r1.tree, r1.prompt);
        CHECK(extract_constituents(at1).size() == 1);
    }

    SUBCASE("three noun phrases come back in span order") {
        const auto& vocab = Vocabulary::builtin();
        auto prompt       = tokenize_words({"red", "car", "blue", "bird", "golden", "watch"}, vocab);
        auto leaf = [](int w) {
            TreeNode n;
            n.span_begin = w;
            n.span_end   = w + 1;
            return n;
        };
        auto np = [&](int b, int head) {
            TreeNode n;
            n.label      = NodeLabel::NounPhrase;
            n.span_begin = b;
            n.span_end   = b + 2;
            n.head_word  = head;
            n.children   = {leaf(b), leaf(b + 1)};
            return n;
        };
        TreeNode root;
        root.label      = NodeLabel::Sentence;
        root.span_begin = 0;
        root.span_end   = 6;
        root.children   = {np(0, 1), np(2, 3), np(4, 5)};
        auto at3 = abstract_constituency_tree(ConstituencyTree{root}, prompt);
        auto cs3 = extract_constituents(at3);
        REQUIRE(cs3.size() == 3);
        for (size_t i = 0; i + 1 < cs3.size(); ++i)
            CHECK(cs3[i].token_span.second <= cs3[i + 1].token_span.first);
    }
}

TEST_CASE("properties: round trip, binary matrix, non-overlapping spans") {
    const std::vector<std::string> adjectives = {"red", "blue", "golden", "silver", "yellow", "purple"};
    const std::vector<std::string> nouns      = {"car", "watch", "bird", "grass", "fence", "square"};
    Rng rng(20240811);
    for (int trial = 0; trial < 60; ++trial) {
        auto a1 = adjectives[rng.uniform_index(adjectives.size())];
        auto a2 = adjectives[rng.uniform_index(adjectives.size())];
        auto n1 = nouns[rng.uniform_index(nouns.size())];
        auto n2 = nouns[rng.uniform_index(nouns.size())];
        if (n1 == n2 || a1 == a2) continue;
        std::string sentence = a1 + " " + n1 + " and " + a2 + " " + n2 + ".";
        auto r = parse_prompt_template(sentence);
        CHECK(edge_words(r) == std::set<std::pair<std::string, std::string>>{{a1, n1}, {a2, n2}});

        auto dm = build_dependency_matrix(r.parse);
        dm.validate();
        for (int j = 0; j < dm.n(); ++j) {
            float row = dm.d.row(j).sum();
            bool depends = false;
            int head_tokens = 0;
            for (const auto& e : r.parse.edges) {
                auto [db, de] = r.prompt.word_to_tokens[e.dep];
                if (j >= db && j < de) {
                    depends     = true;
                    head_tokens = r.prompt.word_to_tokens[e.head].second - r.prompt.word_to_tokens[e.head].first;
                }
            }
            CHECK(row == (depends ? static_cast<float>(head_tokens) : 0.f));
        }

        auto at = abstract_constituency_tree(r.tree, r.prompt);
        auto cs = extract_constituents(at);
        for (size_t i = 0; i < cs.size(); ++i) {
            CHECK(cs[i].token_span.first >= 0);
            CHECK(cs[i].token_span.second <= r.prompt.n());
            if (i + 1 < cs.size()) CHECK(cs[i].token_span.second <= cs[i + 1].token_span.first);
        }
    }
}
