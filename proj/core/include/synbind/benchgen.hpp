#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "synbind/graph.hpp"
#include "synbind/image.hpp"

namespace synbind {

struct Quadruplet {
    std::string attr1, obj1, attr2, obj2;

    void validate() const {
        if (obj1 == obj2) throw SchemaError("quadruplet: objects must differ");
        if (attr1 == attr2) throw SchemaError("quadruplet: attributes must differ");
    }
};

// Sentence of the form "<attr1> <obj1> and <attr2> <obj2>." plus its
// attribute-swapped twin and the two matching graphs.
struct AdversarialPair {
    std::string sentence, adversarial_sentence;
    EvalGraph graph, adversarial_graph;
};

struct SceneGraphCorpus {
    std::vector<EvalGraph> graphs;
};

std::string corpus_to_json(const SceneGraphCorpus& corpus);
SceneGraphCorpus corpus_from_json(const std::string& json_text);
SceneGraphCorpus load_corpus(const std::string& path);
void save_corpus(const SceneGraphCorpus& corpus, const std::string& path);

// All (attr1, obj1, attr2, obj2) where each object co-occurs with each of
// the two attributes at least min_cooccurrence times. Ordered by
// descending joint frequency (the smallest of the four co-occurrence
// counts), ties broken lexicographically.
std::vector<Quadruplet> mine_quadruplets(const SceneGraphCorpus& corpus, int min_cooccurrence);

AdversarialPair make_adversarial_pair(const Quadruplet& q);

// ---------------------------------------------------------------- shapes

struct ShapesVocab {
    std::vector<std::string> shapes = {"square", "circle", "triangle", "cross"};
    std::vector<std::pair<std::string, Rgb>> colors = {
        {"red", {0.93f, 0.11f, 0.14f}},   {"green", {0.13f, 0.75f, 0.26f}},
        {"blue", {0.17f, 0.32f, 0.93f}},  {"yellow", {0.98f, 0.87f, 0.12f}},
        {"purple", {0.63f, 0.18f, 0.86f}}, {"orange", {0.99f, 0.55f, 0.10f}},
    };
    Rgb background  = {0.12f, 0.12f, 0.12f};
    int image_size  = 32;
    float min_radius = 5.f, max_radius = 7.f;
    // probability of drawing a shape's preferred color (shape i prefers
    // color i); 0 keeps the sampling uniform
    float preferred_bias = 0.f;

    const Rgb* color_of(const std::string& name) const;
};

struct RegionTruth {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive box
    std::string shape, color;
};

struct ShapesSample {
    Image image;
    std::string caption;
    EvalGraph graph;
    std::vector<RegionTruth> regions;  // in mention order
    uint64_t sample_seed = 0;
};

// N seeded samples of two distinct shapes in two distinct colors placed
// without overlap; caption follows the adversarial-pair template.
std::vector<ShapesSample> synth_shapes_dataset(const ShapesVocab& vocab, int n, uint64_t seed);

SceneGraphCorpus corpus_from_samples(const std::vector<ShapesSample>& samples);

void save_dataset(const std::vector<ShapesSample>& samples, const std::string& dir);
std::vector<ShapesSample> load_dataset(const std::string& dir);

// ---------------------------------------------------------------- oracle

struct OracleResult {
    bool obj1_present = false, obj2_present = false;
    bool obj1_correct = false, obj2_correct = false;  // dominant color matches
    bool leak1 = false, leak2 = false;  // part of the object in the other object's color

    bool both_correct() const { return obj1_correct && obj2_correct; }
    bool one_correct() const { return obj1_correct || obj2_correct; }
    bool any_leak() const { return leak1 || leak2; }
};

// Palette-based judge: pixels snap to the nearest palette color, connected
// colored blobs are matched to the two expected shapes by shape
// descriptors, and each matched blob's dominant color decides correctness.
// When ground-truth regions are given the blob search is skipped and the
// truth boxes are inspected directly.
OracleResult binding_oracle(const Image& image, const EvalGraph& graph, const ShapesVocab& vocab,
                            const std::vector<RegionTruth>* truth = nullptr);

}  // namespace synbind
