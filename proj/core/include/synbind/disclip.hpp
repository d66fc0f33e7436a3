#pragma once

#include <string>
#include <vector>

#include "synbind/syntax.hpp"
#include "synbind/text_encoder.hpp"

namespace synbind {

struct DisclipSegment {
    int source = -1;  // -1 = whole prompt, otherwise constituent index
    std::pair<int, int> range;  // row range [begin, end) in the concatenated encoding
};

// Whole-prompt token embeddings (end-of-text row kept) concatenated with
// independent encodings of each kept constituent (end-of-text and padding
// rows dropped), in span order.
struct DisCLIPEncoding {
    Mat embeddings;  // n' x d
    std::vector<DisclipSegment> segments;
    std::vector<std::string> token_strings;  // per-row provenance
    int whole_len = 0;  // token count of the whole-prompt segment

    int n() const { return static_cast<int>(embeddings.rows()); }
};

DisCLIPEncoding encode_disclip(const TokenizedPrompt& prompt, const AbstractedTree& atree,
                               const TextEncoderHandle& encoder,
                               const Vocabulary& vocab = Vocabulary::builtin());

// Extends D from n x n to n' x n': the original matrix occupies the top
// left block; every token row of a constituent depends on that
// constituent's head-noun tokens inside the whole-prompt segment.
DependencyMatrix extend_dependency_matrix(const DependencyMatrix& dep, const DisCLIPEncoding& encoding,
                                          const std::vector<Constituent>& constituents);

}  // namespace synbind
