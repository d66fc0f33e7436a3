#include "synbind/disclip.hpp"

namespace synbind {

DisCLIPEncoding encode_disclip(const TokenizedPrompt& prompt, const AbstractedTree& atree,
                               const TextEncoderHandle& encoder, const Vocabulary& vocab) {
    prompt.validate();
    auto constituents = extract_constituents(atree);

    TokenEmbeddings whole = encoder.encode(prompt.tokens);
    if (whole.rows.rows() != prompt.n())
        throw ShapeError("disclip: encoder returned " + std::to_string(whole.rows.rows()) +
                         " rows for a " + std::to_string(prompt.n()) + "-token prompt");

    DisCLIPEncoding enc;
    enc.whole_len = prompt.n();

    std::vector<Mat> parts;
    parts.push_back(whole.rows);
    enc.segments.push_back({-1, {0, prompt.n()}});
    for (int t : prompt.tokens) enc.token_strings.push_back(vocab.piece(t));

    int cursor = prompt.n();
    for (size_t ci = 0; ci < constituents.size(); ++ci) {
        auto [b, e] = constituents[ci].token_span;
        if (e <= b)
            throw ParamError("disclip: constituent " + std::to_string(ci) + " has an empty token range");
        std::vector<int> ids(prompt.tokens.begin() + b, prompt.tokens.begin() + e);
        ids.push_back(vocab.eos_id());
        TokenEmbeddings sub = encoder.encode(ids);
        if (sub.rows.rows() != static_cast<Eigen::Index>(ids.size()))
            throw ShapeError("disclip: encoder returned " + std::to_string(sub.rows.rows()) +
                             " rows for a " + std::to_string(ids.size()) + "-token constituent");
        // keep content rows only; the constituent's own end-of-text row is
        // dropped so the whole prompt stays the single sentence embedding
        int keep = static_cast<int>(ids.size()) - 1;
        parts.push_back(sub.rows.topRows(keep));
        enc.segments.push_back({static_cast<int>(ci), {cursor, cursor + keep}});
        for (int k = 0; k < keep; ++k) enc.token_strings.push_back(vocab.piece(ids[k]));
        cursor += keep;
    }

    enc.embeddings = Mat(cursor, whole.rows.cols());
    int row = 0;
    for (const auto& p : parts) {
        enc.embeddings.middleRows(row, p.rows()) = p;
        row += static_cast<int>(p.rows());
    }
    return enc;
}

DependencyMatrix extend_dependency_matrix(const DependencyMatrix& dep, const DisCLIPEncoding& encoding,
                                          const std::vector<Constituent>& constituents) {
    const int n       = dep.n();
    const int n_prime = encoding.n();
    if (encoding.whole_len != n)
        throw ShapeError("extend_dependency_matrix: D is " + std::to_string(n) +
                         " tokens but the whole-prompt segment has " + std::to_string(encoding.whole_len));

    DependencyMatrix out;
    out.d = Mat::Zero(n_prime, n_prime);
    out.d.topLeftCorner(n, n) = dep.d;

    for (const auto& seg : encoding.segments) {
        if (seg.source < 0) continue;
        if (seg.source >= static_cast<int>(constituents.size()))
            throw ShapeError("extend_dependency_matrix: segment references constituent " +
                             std::to_string(seg.source) + " but only " +
                             std::to_string(constituents.size()) + " were given");
        const auto& cons = constituents[seg.source];
        for (int k : cons.noun_token_positions) {
            if (k < 0 || k >= n)
                throw ShapeError("extend_dependency_matrix: noun token " + std::to_string(k) +
                                 " lies outside the whole-prompt segment of " + std::to_string(n));
            for (int r = seg.range.first; r < seg.range.second; ++r) out.d(r, k) = 1.f;
        }
    }
    return out;
}

}  // namespace synbind
