#pragma once

#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "synbind/errors.hpp"
#include "synbind/mat.hpp"

namespace synbind {

struct AbstractionError : DataError {
    explicit AbstractionError(const std::string& msg) : DataError(msg) {}
};

// Subword vocabulary with greedy longest-prefix chunking. Single letters
// a-z are always present, so any lowercase alphabetic word tokenizes;
// common corpus words are whole pieces. Id 0 is the sentence-end token.
class Vocabulary {
public:
    static const Vocabulary& builtin();
    explicit Vocabulary(std::vector<std::string> pieces);

    int eos_id() const { return 0; }
    int size() const { return static_cast<int>(pieces_.size()); }
    const std::string& piece(int id) const { return pieces_.at(id); }
    std::optional<int> find(const std::string& piece) const;

    // word -> subword ids, greedy longest match; throws ParseError on
    // characters outside the vocabulary alphabet
    std::vector<int> encode_word(const std::string& word) const;

    uint64_t fingerprint() const;

private:
    std::vector<std::string> pieces_;
    std::unordered_map<std::string, int> index_;
    size_t max_piece_len_ = 1;
};

struct TokenizedPrompt {
    std::vector<std::string> words;                    // lowercase surface words
    std::vector<int> tokens;                           // subword ids, trailing eos included
    std::vector<std::pair<int, int>> word_to_tokens;   // [begin, end) per word

    int n() const { return static_cast<int>(tokens.size()); }  // includes sentence-end token
    int word_count() const { return static_cast<int>(words.size()); }
    std::string text() const;
    void validate() const;  // throws SchemaError on inconsistent ranges
};

TokenizedPrompt tokenize_words(const std::vector<std::string>& words, const Vocabulary& vocab);

struct DependencyEdge {
    int dep  = -1;  // dependent word index
    int head = -1;  // head word index
    std::string rel;
};

struct DependencyParse {
    std::vector<DependencyEdge> edges;
    TokenizedPrompt tokens;

    void validate() const;
};

enum class NodeLabel { Sentence, NounPhrase, Other };

struct TreeNode {
    NodeLabel label = NodeLabel::Other;
    int span_begin  = 0;  // word span [begin, end)
    int span_end    = 0;
    int head_word   = -1;  // for NP nodes; -1 when unset
    std::vector<TreeNode> children;

    bool is_leaf() const { return children.empty(); }
    std::vector<int> leaf_words() const;
};

struct ConstituencyTree {
    TreeNode root;
    void validate() const;  // child spans partition parent spans, leaves are single words
};

struct KeptConstituent {
    std::pair<int, int> word_span;  // [begin, end)
    int head_word = -1;
};

struct AbstractionRecord {
    std::pair<int, int> node_span;
    std::vector<int> removed_words;
};

struct AbstractedTree {
    // Tree after replacing dominated noun phrases by their head nouns,
    // renumbered over the surviving words so spans stay contiguous.
    ConstituencyTree base;
    std::vector<int> surviving_words;  // abstracted word index -> original word index
    TokenizedPrompt prompt;
    std::vector<KeptConstituent> minimal_nps;  // original spans, span order
    std::pair<int, int> sentence_span;
    std::vector<AbstractionRecord> removals;

    // minimal noun phrases plus the full sentence, span order
    std::vector<std::pair<int, int>> kept_constituents() const;
};

struct DependencyMatrix {
    Mat d;  // n x n, entries in {0,1}, zero diagonal

    int n() const { return static_cast<int>(d.rows()); }
    void validate() const;
};

struct ParseResult {
    TokenizedPrompt prompt;
    DependencyParse parse;
    ConstituencyTree tree;
};

// Template backend: recognizes "<article>? <adj>* <noun>" optionally
// coordinated once with "and", optional trailing period. Emits one amod
// edge per adjective and one noun-phrase node per group. Anything else
// throws ParseError.
ParseResult parse_prompt_template(const std::string& prompt,
                                  const Vocabulary& vocab = Vocabulary::builtin());

// File backend: precomputed parse JSON (see save_parse_json for the schema).
// Structures echo the file contents verbatim; spans and indices validated.
ParseResult load_parse_json(const std::string& json_text);
ParseResult load_parse_file(const std::string& path);
std::string save_parse_json(const ParseResult& parse);

extern const std::set<std::string> kDefaultKeepRelations;  // adjectival/attributive modifiers

// Word-level edges expanded to the full cross product of their words'
// subword tokens: every token of the dependent word marks every token of
// the head word. Unparsed words yield all-zero rows.
DependencyMatrix build_dependency_matrix(const DependencyParse& parse,
                                         const std::set<std::string>& keep_relations = kDefaultKeepRelations);

// Every noun phrase that properly dominates another noun phrase has each
// maximal dominated noun phrase replaced by that phrase's head noun.
// Minimal noun phrases and the full sentence are the kept constituents.
// The head noun of a phrase is its recorded head word, or the rightmost
// non-function leaf when the parse did not provide one.
AbstractedTree abstract_constituency_tree(const ConstituencyTree& tree, const TokenizedPrompt& prompt);

struct Constituent {
    std::pair<int, int> token_span;        // [begin, end) in whole-prompt token indices
    std::vector<int> noun_token_positions; // head-noun token indices inside the span
};

// One entry per kept constituent excluding the full sentence, span order.
std::vector<Constituent> extract_constituents(const AbstractedTree& atree);

}  // namespace synbind
