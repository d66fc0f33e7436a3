#include "synbind/syntax.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace synbind {

using nlohmann::json;

// ---------------------------------------------------------------- Vocabulary

Vocabulary::Vocabulary(std::vector<std::string> pieces) : pieces_(std::move(pieces)) {
    for (int i = 0; i < static_cast<int>(pieces_.size()); ++i) {
        index_.emplace(pieces_[i], i);
        max_piece_len_ = std::max(max_piece_len_, pieces_[i].size());
    }
}

const Vocabulary& Vocabulary::builtin() {
    static const Vocabulary vocab = [] {
        std::vector<std::string> p;
        p.push_back("<eos>");
        p.push_back(".");
        p.push_back(",");
        for (char c = 'a'; c <= 'z'; ++c) p.push_back(std::string(1, c));
        const char* words[] = {
            // function words
            "an", "and", "the", "of", "in", "on", "with",
            // palette colors
            "red", "green", "blue", "yellow", "purple", "orange",
            // extra attributes seen in prompts
            "silver", "gold", "en", "white", "black", "gray", "brown", "pink",
            // shapes
            "square", "circle", "triangle", "cross",
            // common nouns for parser fixtures
            "car", "watch", "bird", "grass", "fence", "cat", "dog", "hat",
            "ingot", "fish", "bottom",
        };
        for (const char* w : words) p.push_back(w);
        return Vocabulary(std::move(p));
    }();
    return vocab;
}

std::optional<int> Vocabulary::find(const std::string& piece) const {
    auto it = index_.find(piece);
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

std::vector<int> Vocabulary::encode_word(const std::string& word) const {
    if (word.empty()) throw ParseError("cannot tokenize an empty word");
    std::vector<int> out;
    size_t pos = 0;
    while (pos < word.size()) {
        size_t best_len = 0;
        int best_id     = -1;
        size_t cap      = std::min(max_piece_len_, word.size() - pos);
        for (size_t len = cap; len >= 1; --len) {
            auto it = index_.find(word.substr(pos, len));
            if (it != index_.end()) {
                best_len = len;
                best_id  = it->second;
                break;
            }
        }
        if (best_id < 0)
            throw ParseError("cannot tokenize word '" + word + "': no vocabulary piece at '" +
                             word.substr(pos, 1) + "'");
        out.push_back(best_id);
        pos += best_len;
    }
    return out;
}

uint64_t Vocabulary::fingerprint() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& p : pieces_) {
        h = fnv1a(p, h);
        h = fnv1a("\x1f", h);
    }
    return h;
}

// ----------------------------------------------------------- TokenizedPrompt

std::string TokenizedPrompt::text() const {
    std::string s;
    for (size_t i = 0; i < words.size(); ++i) {
        if (i && words[i] != "." && words[i] != ",") s += ' ';
        s += words[i];
    }
    return s;
}

void TokenizedPrompt::validate() const {
    if (tokens.empty()) throw SchemaError("tokens: prompt must contain at least the sentence-end token");
    if (words.size() != word_to_tokens.size())
        throw SchemaError("word_to_tokens: expected one range per word");
    int cursor = 0;
    for (size_t w = 0; w < word_to_tokens.size(); ++w) {
        auto [b, e] = word_to_tokens[w];
        if (b != cursor || e <= b)
            throw SchemaError("word_to_tokens: range for word " + std::to_string(w) +
                              " must start at " + std::to_string(cursor) + " and be non-empty");
        if (e > n()) throw SchemaError("word_to_tokens: range for word " + std::to_string(w) + " exceeds token count");
        cursor = e;
    }
    if (cursor != n() - 1)
        throw SchemaError("word_to_tokens: ranges must cover all tokens except the sentence-end token");
}

TokenizedPrompt tokenize_words(const std::vector<std::string>& words, const Vocabulary& vocab) {
    TokenizedPrompt tp;
    tp.words = words;
    for (const auto& w : words) {
        auto ids  = vocab.encode_word(w);
        int begin = tp.n();
        tp.tokens.insert(tp.tokens.end(), ids.begin(), ids.end());
        tp.word_to_tokens.emplace_back(begin, tp.n());
    }
    tp.tokens.push_back(vocab.eos_id());
    tp.validate();
    return tp;
}

void DependencyParse::validate() const {
    tokens.validate();
    for (const auto& e : edges) {
        if (e.dep == e.head) throw SchemaError("dependencies: self-edge at word " + std::to_string(e.dep));
        if (e.dep < 0 || e.dep >= tokens.word_count() || e.head < 0 || e.head >= tokens.word_count())
            throw SchemaError("dependencies: edge " + std::to_string(e.dep) + "->" + std::to_string(e.head) +
                              " is outside the word range");
    }
}

std::vector<int> TreeNode::leaf_words() const {
    std::vector<int> out;
    if (is_leaf()) {
        for (int w = span_begin; w < span_end; ++w) out.push_back(w);
        return out;
    }
    for (const auto& c : children) {
        auto sub = c.leaf_words();
        out.insert(out.end(), sub.begin(), sub.end());
    }
    return out;
}

static void validate_node(const TreeNode& node) {
    if (node.span_end <= node.span_begin)
        throw SchemaError("constituency: empty span [" + std::to_string(node.span_begin) + "," +
                          std::to_string(node.span_end) + ")");
    if (node.is_leaf()) {
        if (node.span_end != node.span_begin + 1)
            throw SchemaError("constituency: leaf at " + std::to_string(node.span_begin) +
                              " must cover exactly one word");
        return;
    }
    int cursor = node.span_begin;
    for (const auto& c : node.children) {
        if (c.span_begin != cursor)
            throw SchemaError("constituency: children of [" + std::to_string(node.span_begin) + "," +
                              std::to_string(node.span_end) + ") do not partition it");
        cursor = c.span_end;
        validate_node(c);
    }
    if (cursor != node.span_end)
        throw SchemaError("constituency: children of [" + std::to_string(node.span_begin) + "," +
                          std::to_string(node.span_end) + ") do not cover it");
}

void ConstituencyTree::validate() const { validate_node(root); }

void DependencyMatrix::validate() const {
    if (d.rows() != d.cols()) throw ShapeError("dependency matrix must be square");
    for (int i = 0; i < d.rows(); ++i)
        for (int j = 0; j < d.cols(); ++j) {
            float v = d(i, j);
            if (v != 0.f && v != 1.f) throw SchemaError("dependency matrix entries must be 0 or 1");
            if (i == j && v != 0.f) throw SchemaError("dependency matrix diagonal must be zero");
        }
}

// ------------------------------------------------------------ template parse

static bool is_article(const std::string& w) { return w == "a" || w == "an" || w == "the"; }

namespace {
struct NounGroup {
    int begin = 0, end = 0;  // word span
    int noun  = -1;
    std::vector<int> adjectives;
};
}  // namespace

static NounGroup parse_noun_group(const std::vector<std::string>& words, int begin, int end) {
    NounGroup g;
    g.begin = begin;
    g.end   = end;
    int content_begin = begin;
    if (content_begin < end && is_article(words[content_begin])) ++content_begin;
    if (content_begin >= end)
        throw ParseError("template parse: noun phrase at word " + std::to_string(begin) + " has no noun");
    g.noun = end - 1;
    for (int w = content_begin; w < end - 1; ++w) g.adjectives.push_back(w);
    return g;
}

ParseResult parse_prompt_template(const std::string& prompt, const Vocabulary& vocab) {
    if (prompt.empty()) throw ParseError("template parse: empty prompt");

    // lowercase fold and split; a trailing period becomes its own word
    std::vector<std::string> words;
    std::string cur;
    auto flush = [&] {
        if (cur.empty()) return;
        if (cur.size() > 1 && cur.back() == '.') {
            words.push_back(cur.substr(0, cur.size() - 1));
            words.push_back(".");
        } else {
            words.push_back(cur);
        }
        cur.clear();
    };
    for (char ch : prompt) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            flush();
        } else {
            cur += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        }
    }
    flush();
    if (words.empty()) throw ParseError("template parse: prompt contains no words");

    bool has_period = words.back() == ".";
    int content_end = has_period ? static_cast<int>(words.size()) - 1 : static_cast<int>(words.size());
    if (content_end == 0) throw ParseError("template parse: prompt contains only punctuation");

    std::vector<int> and_positions;
    for (int w = 0; w < content_end; ++w)
        if (words[w] == "and") and_positions.push_back(w);
    if (and_positions.size() > 1)
        throw ParseError("template parse: more than one coordination in '" + prompt + "'");

    std::vector<NounGroup> groups;
    if (and_positions.empty()) {
        groups.push_back(parse_noun_group(words, 0, content_end));
    } else {
        int cut = and_positions[0];
        if (cut == 0 || cut == content_end - 1)
            throw ParseError("template parse: dangling 'and' in '" + prompt + "'");
        groups.push_back(parse_noun_group(words, 0, cut));
        groups.push_back(parse_noun_group(words, cut + 1, content_end));
    }

    ParseResult result;
    result.prompt = tokenize_words(words, vocab);

    for (const auto& g : groups)
        for (int adj : g.adjectives)
            result.parse.edges.push_back({adj, g.noun, "amod"});
    result.parse.tokens = result.prompt;
    result.parse.validate();

    auto leaf = [](int w) {
        TreeNode n;
        n.span_begin = w;
        n.span_end   = w + 1;
        return n;
    };
    auto np_node = [&](const NounGroup& g) {
        TreeNode np;
        np.label      = NodeLabel::NounPhrase;
        np.span_begin = g.begin;
        np.span_end   = g.end;
        np.head_word  = g.noun;
        for (int w = g.begin; w < g.end; ++w) np.children.push_back(leaf(w));
        return np;
    };

    TreeNode top;
    if (groups.size() == 1) {
        top = np_node(groups[0]);
    } else {
        top.label      = NodeLabel::NounPhrase;
        top.span_begin = groups[0].begin;
        top.span_end   = groups[1].end;
        top.head_word  = groups[1].noun;
        top.children.push_back(np_node(groups[0]));
        top.children.push_back(leaf(and_positions[0]));
        top.children.push_back(np_node(groups[1]));
    }

    TreeNode root;
    root.label      = NodeLabel::Sentence;
    root.span_begin = 0;
    root.span_end   = static_cast<int>(words.size());
    root.children.push_back(top);
    if (has_period) root.children.push_back(leaf(content_end));
    result.tree.root = root;
    result.tree.validate();
    return result;
}

// ----------------------------------------------------------------- parse IO

static std::string label_to_string(NodeLabel l) {
    switch (l) {
        case NodeLabel::Sentence: return "sentence";
        case NodeLabel::NounPhrase: return "NP";
        default: return "other";
    }
}

static NodeLabel label_from_string(const std::string& s) {
    if (s == "sentence" || s == "S") return NodeLabel::Sentence;
    if (s == "NP") return NodeLabel::NounPhrase;
    return NodeLabel::Other;
}

static json node_to_json(const TreeNode& n) {
    json j;
    j["label"] = label_to_string(n.label);
    j["span"]  = {n.span_begin, n.span_end};
    if (n.head_word >= 0) j["head"] = n.head_word;
    if (!n.is_leaf()) {
        json kids = json::array();
        for (const auto& c : n.children) kids.push_back(node_to_json(c));
        j["children"] = kids;
    }
    return j;
}

static TreeNode node_from_json(const json& j, int word_count) {
    if (!j.is_object()) throw SchemaError("constituency: node must be an object");
    TreeNode n;
    if (!j.contains("span") || !j["span"].is_array() || j["span"].size() != 2)
        throw SchemaError("constituency.span: expected [start, end]");
    n.span_begin = j["span"][0].get<int>();
    n.span_end   = j["span"][1].get<int>();
    if (n.span_begin < 0 || n.span_end > word_count)
        throw SchemaError("constituency.span: [" + std::to_string(n.span_begin) + "," +
                          std::to_string(n.span_end) + ") outside the sentence");
    n.label = label_from_string(j.value("label", std::string("other")));
    if (j.contains("head")) {
        n.head_word = j["head"].get<int>();
        if (n.head_word < n.span_begin || n.head_word >= n.span_end)
            throw SchemaError("constituency.head: head word " + std::to_string(n.head_word) +
                              " outside the node span");
    }
    if (j.contains("children")) {
        for (const auto& c : j["children"]) n.children.push_back(node_from_json(c, word_count));
    }
    return n;
}

ParseResult load_parse_json(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw SchemaError(std::string("parse file is not valid JSON: ") + e.what());
    }
    for (const char* key : {"words", "tokens", "word_to_tokens", "dependencies", "constituency"})
        if (!j.contains(key)) throw SchemaError(std::string("parse file: missing field '") + key + "'");

    ParseResult result;
    try {
        result.prompt.words = j["words"].get<std::vector<std::string>>();
    } catch (const json::exception&) {
        throw SchemaError("words: expected an array of strings");
    }
    try {
        result.prompt.tokens = j["tokens"].get<std::vector<int>>();
    } catch (const json::exception&) {
        throw SchemaError("tokens: expected an array of integers");
    }
    if (!j["word_to_tokens"].is_array())
        throw SchemaError("word_to_tokens: expected an array of [start, end] pairs");
    for (const auto& r : j["word_to_tokens"]) {
        if (!r.is_array() || r.size() != 2) throw SchemaError("word_to_tokens: expected [start, end] pairs");
        result.prompt.word_to_tokens.emplace_back(r[0].get<int>(), r[1].get<int>());
    }
    result.prompt.validate();

    if (!j["dependencies"].is_array()) throw SchemaError("dependencies: expected an array");
    for (const auto& e : j["dependencies"]) {
        if (!e.is_object() || !e.contains("dep") || !e.contains("head"))
            throw SchemaError("dependencies: each edge needs 'dep' and 'head'");
        result.parse.edges.push_back({e["dep"].get<int>(), e["head"].get<int>(), e.value("rel", std::string())});
    }
    result.parse.tokens = result.prompt;
    result.parse.validate();

    result.tree.root = node_from_json(j["constituency"], result.prompt.word_count());
    if (result.tree.root.span_begin != 0 || result.tree.root.span_end != result.prompt.word_count())
        throw SchemaError("constituency.span: root must cover the whole sentence");
    result.tree.validate();
    return result;
}

ParseResult load_parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open parse file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return load_parse_json(ss.str());
}

std::string save_parse_json(const ParseResult& parse) {
    json j;
    j["words"]  = parse.prompt.words;
    j["tokens"] = parse.prompt.tokens;
    json w2t    = json::array();
    for (auto [b, e] : parse.prompt.word_to_tokens) w2t.push_back({b, e});
    j["word_to_tokens"] = w2t;
    json deps           = json::array();
    for (const auto& e : parse.parse.edges) deps.push_back({{"dep", e.dep}, {"head", e.head}, {"rel", e.rel}});
    j["dependencies"] = deps;
    j["constituency"] = node_to_json(parse.tree.root);
    return j.dump(2);
}

// ------------------------------------------------------- dependency matrix

const std::set<std::string> kDefaultKeepRelations = {"amod", "acomp", "attr"};

DependencyMatrix build_dependency_matrix(const DependencyParse& parse,
                                         const std::set<std::string>& keep_relations) {
    parse.validate();
    const auto& tp = parse.tokens;
    DependencyMatrix dm;
    dm.d = Mat::Zero(tp.n(), tp.n());
    for (const auto& e : parse.edges) {
        if (!keep_relations.count(e.rel)) continue;
        auto [db, de] = tp.word_to_tokens[e.dep];
        auto [hb, he] = tp.word_to_tokens[e.head];
        for (int j = db; j < de; ++j)
            for (int k = hb; k < he; ++k)
                if (j != k) dm.d(j, k) = 1.f;
    }
    return dm;
}

// ---------------------------------------------------------------- abstraction

static bool subtree_has_np(const TreeNode& n) {
    for (const auto& c : n.children) {
        if (c.label == NodeLabel::NounPhrase || subtree_has_np(c)) return true;
    }
    return false;
}

static bool is_function_word(const std::string& w) {
    return is_article(w) || w == "and" || w == "of" || w == "in" || w == "on" || w == "with" ||
           w == "." || w == ",";
}

static int resolve_head(const TreeNode& np, const TokenizedPrompt& prompt) {
    if (np.head_word >= 0) return np.head_word;
    auto leaves = np.leaf_words();
    for (auto it = leaves.rbegin(); it != leaves.rend(); ++it) {
        if (!is_function_word(prompt.words[*it])) return *it;
    }
    throw AbstractionError("noun phrase [" + std::to_string(np.span_begin) + "," +
                           std::to_string(np.span_end) + ") has no resolvable head noun");
}

static void collect_minimal_nps(const TreeNode& n, const TokenizedPrompt& prompt,
                                std::vector<KeptConstituent>& out) {
    if (n.label == NodeLabel::NounPhrase && !subtree_has_np(n)) {
        out.push_back({{n.span_begin, n.span_end}, resolve_head(n, prompt)});
        return;  // nothing below can be a noun phrase
    }
    for (const auto& c : n.children) collect_minimal_nps(c, prompt, out);
}

// Replace each maximal noun-phrase descendant of `n` (reachable without
// crossing another noun phrase) by a single head-noun leaf.
static TreeNode replace_np_descendants(const TreeNode& n, const TokenizedPrompt& prompt,
                                       std::vector<AbstractionRecord>& records) {
    TreeNode out = n;
    out.children.clear();
    for (const auto& c : n.children) {
        if (c.label == NodeLabel::NounPhrase) {
            int head = resolve_head(c, prompt);
            AbstractionRecord rec;
            rec.node_span = {c.span_begin, c.span_end};
            for (int w : c.leaf_words())
                if (w != head) rec.removed_words.push_back(w);
            records.push_back(std::move(rec));
            TreeNode leaf;
            leaf.span_begin = head;
            leaf.span_end   = head + 1;
            out.children.push_back(leaf);
        } else {
            out.children.push_back(replace_np_descendants(c, prompt, records));
        }
    }
    return out;
}

static TreeNode abstract_node(const TreeNode& n, const TokenizedPrompt& prompt,
                              std::vector<AbstractionRecord>& records) {
    // bottom-up so chains of nested noun phrases collapse one level at a time
    TreeNode out = n;
    out.children.clear();
    for (const auto& c : n.children) out.children.push_back(abstract_node(c, prompt, records));

    if (out.label == NodeLabel::NounPhrase && subtree_has_np(out)) {
        out = replace_np_descendants(out, prompt, records);
    }
    return out;
}

// Abstracted spans no longer partition parents; renumber leaves so the
// result is a well-formed tree over the surviving words.
static void reindex_spans(TreeNode& n, const std::vector<int>& word_remap) {
    if (n.is_leaf()) {
        n.span_begin = word_remap[n.span_begin];
        n.span_end   = n.span_begin + 1;
        return;
    }
    for (auto& c : n.children) reindex_spans(c, word_remap);
    n.span_begin = n.children.front().span_begin;
    n.span_end   = n.children.back().span_end;
    if (n.head_word >= 0) n.head_word = word_remap[n.head_word];  // -1 when the head was removed
}

AbstractedTree abstract_constituency_tree(const ConstituencyTree& tree, const TokenizedPrompt& prompt) {
    tree.validate();
    AbstractedTree at;
    at.prompt        = prompt;
    at.sentence_span = {tree.root.span_begin, tree.root.span_end};
    collect_minimal_nps(tree.root, prompt, at.minimal_nps);
    for (const auto& np : at.minimal_nps) {
        if (np.head_word < np.word_span.first || np.head_word >= np.word_span.second)
            throw AbstractionError("head noun outside noun phrase [" + std::to_string(np.word_span.first) +
                                   "," + std::to_string(np.word_span.second) + ")");
    }

    TreeNode abstracted = abstract_node(tree.root, prompt, at.removals);

    at.surviving_words = abstracted.leaf_words();  // original indices, left to right
    std::vector<int> remap(prompt.word_count(), -1);
    for (int i = 0; i < static_cast<int>(at.surviving_words.size()); ++i)
        remap[at.surviving_words[i]] = i;
    reindex_spans(abstracted, remap);
    at.base.root = abstracted;
    at.base.validate();
    return at;
}

std::vector<std::pair<int, int>> AbstractedTree::kept_constituents() const {
    std::vector<std::pair<int, int>> out;
    for (const auto& np : minimal_nps) out.push_back(np.word_span);
    out.push_back(sentence_span);
    return out;
}

std::vector<Constituent> extract_constituents(const AbstractedTree& atree) {
    std::vector<Constituent> out;
    for (const auto& np : atree.minimal_nps) {
        if (np.word_span.second <= np.word_span.first ||
            np.word_span.second > atree.prompt.word_count())
            throw ParamError("extract_constituents: constituent span [" +
                             std::to_string(np.word_span.first) + "," +
                             std::to_string(np.word_span.second) + ") is empty or out of range");
        Constituent c;
        c.token_span = {atree.prompt.word_to_tokens[np.word_span.first].first,
                        atree.prompt.word_to_tokens[np.word_span.second - 1].second};
        auto [hb, he] = atree.prompt.word_to_tokens[np.head_word];
        for (int t = hb; t < he; ++t) c.noun_token_positions.push_back(t);
        out.push_back(std::move(c));
    }
    return out;
}

}  // namespace synbind
