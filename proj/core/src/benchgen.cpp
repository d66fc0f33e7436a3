#include "synbind/benchgen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "synbind/rng.hpp"

namespace synbind {

using nlohmann::json;

// ---------------------------------------------------------------- corpus IO

static json graph_to_json(const EvalGraph& g) {
    json objs = json::array();
    objs.push_back({{"name", g.obj1}, {"attributes", g.attrs1}});
    objs.push_back({{"name", g.obj2}, {"attributes", g.attrs2}});
    json rels = json::array();
    if (g.relation) rels.push_back({{"s", 0}, {"p", *g.relation}, {"o", 1}});
    return json{{"objects", objs}, {"relations", rels}};
}

static EvalGraph graph_from_json(const json& j) {
    if (!j.contains("objects") || !j["objects"].is_array() || j["objects"].size() != 2)
        throw SchemaError("graph: expected exactly two objects");
    EvalGraph g;
    g.obj1   = j["objects"][0].at("name").get<std::string>();
    g.attrs1 = j["objects"][0].value("attributes", std::vector<std::string>{});
    g.obj2   = j["objects"][1].at("name").get<std::string>();
    g.attrs2 = j["objects"][1].value("attributes", std::vector<std::string>{});
    if (j.contains("relations") && !j["relations"].empty())
        g.relation = j["relations"][0].at("p").get<std::string>();
    g.validate();
    return g;
}

std::string corpus_to_json(const SceneGraphCorpus& corpus) {
    json graphs = json::array();
    for (const auto& g : corpus.graphs) graphs.push_back(graph_to_json(g));
    return json{{"graphs", graphs}}.dump(2);
}

SceneGraphCorpus corpus_from_json(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw SchemaError(std::string("corpus is not valid JSON: ") + e.what());
    }
    if (!j.contains("graphs") || !j["graphs"].is_array())
        throw SchemaError("corpus: missing 'graphs' array");
    SceneGraphCorpus corpus;
    for (const auto& g : j["graphs"]) corpus.graphs.push_back(graph_from_json(g));
    return corpus;
}

SceneGraphCorpus load_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open corpus: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return corpus_from_json(ss.str());
}

void save_corpus(const SceneGraphCorpus& corpus, const std::string& path) {
    atomic_write_text(path, corpus_to_json(corpus));
}

// ------------------------------------------------------------------ mining

std::vector<Quadruplet> mine_quadruplets(const SceneGraphCorpus& corpus, int min_cooccurrence) {
    std::map<std::pair<std::string, std::string>, int> counts;  // (object, attribute) -> n
    std::vector<std::string> objects, attributes;
    auto note = [&](std::vector<std::string>& v, const std::string& s) {
        if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(s);
    };
    for (const auto& g : corpus.graphs) {
        note(objects, g.obj1);
        note(objects, g.obj2);
        for (const auto& a : g.attrs1) {
            note(attributes, a);
            ++counts[{g.obj1, a}];
        }
        for (const auto& a : g.attrs2) {
            note(attributes, a);
            ++counts[{g.obj2, a}];
        }
    }
    std::sort(objects.begin(), objects.end());
    std::sort(attributes.begin(), attributes.end());

    auto count_of = [&](const std::string& o, const std::string& a) {
        auto it = counts.find({o, a});
        return it == counts.end() ? 0 : it->second;
    };

    struct Scored {
        Quadruplet q;
        int joint;
    };
    std::vector<Scored> all;
    for (const auto& o1 : objects)
        for (const auto& o2 : objects) {
            if (o1 == o2) continue;
            for (const auto& a1 : attributes)
                for (const auto& a2 : attributes) {
                    if (a1 == a2) continue;
                    int joint = std::min(std::min(count_of(o1, a1), count_of(o1, a2)),
                                         std::min(count_of(o2, a1), count_of(o2, a2)));
                    if (joint >= min_cooccurrence) all.push_back({{a1, o1, a2, o2}, joint});
                }
        }
    std::stable_sort(all.begin(), all.end(), [](const Scored& x, const Scored& y) {
        if (x.joint != y.joint) return x.joint > y.joint;
        auto kx = std::tie(x.q.attr1, x.q.obj1, x.q.attr2, x.q.obj2);
        auto ky = std::tie(y.q.attr1, y.q.obj1, y.q.attr2, y.q.obj2);
        return kx < ky;
    });
    std::vector<Quadruplet> out;
    out.reserve(all.size());
    for (auto& s : all) out.push_back(std::move(s.q));
    return out;
}

AdversarialPair make_adversarial_pair(const Quadruplet& q) {
    q.validate();
    AdversarialPair p;
    p.sentence             = q.attr1 + " " + q.obj1 + " and " + q.attr2 + " " + q.obj2 + ".";
    p.adversarial_sentence = q.attr2 + " " + q.obj1 + " and " + q.attr1 + " " + q.obj2 + ".";
    p.graph.obj1   = q.obj1;
    p.graph.obj2   = q.obj2;
    p.graph.attrs1 = {q.attr1};
    p.graph.attrs2 = {q.attr2};
    p.adversarial_graph = p.graph.with_swapped_attributes();
    return p;
}

// ------------------------------------------------------------------ shapes

const Rgb* ShapesVocab::color_of(const std::string& name) const {
    for (const auto& [n, c] : colors)
        if (n == name) return &c;
    return nullptr;
}

static void draw_shape(Image& img, const std::string& shape, float cx, float cy, float r, const Rgb& c) {
    if (shape == "square") draw_square(img, cx, cy, r, c);
    else if (shape == "circle") draw_circle(img, cx, cy, r, c);
    else if (shape == "triangle") draw_triangle(img, cx, cy, r, c);
    else if (shape == "cross") draw_cross(img, cx, cy, r, c);
    else throw ParamError("unknown shape '" + shape + "'");
}

std::vector<ShapesSample> synth_shapes_dataset(const ShapesVocab& vocab, int n, uint64_t seed) {
    if (static_cast<int>(vocab.shapes.size()) < 2 || static_cast<int>(vocab.colors.size()) < 2)
        throw ParamError("shapes dataset needs at least two shapes and two colors");
    std::vector<ShapesSample> out(std::max(n, 0));
    std::vector<std::string> errors(std::max(n, 0));

#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) try {
        Rng rng(mix_seed(seed, static_cast<uint64_t>(i)));
        ShapesSample& s = out[i];
        s.sample_seed   = mix_seed(seed, static_cast<uint64_t>(i));

        int shape1 = static_cast<int>(rng.uniform_index(vocab.shapes.size()));
        int shape2 = shape1;
        while (shape2 == shape1) shape2 = static_cast<int>(rng.uniform_index(vocab.shapes.size()));

        auto pick_color = [&](int shape_idx) {
            int preferred = shape_idx % static_cast<int>(vocab.colors.size());
            if (vocab.preferred_bias > 0.f && rng.uniform() < vocab.preferred_bias) return preferred;
            return static_cast<int>(rng.uniform_index(vocab.colors.size()));
        };
        int color1 = pick_color(shape1);
        int color2 = pick_color(shape2);
        int guard  = 0;
        while (color2 == color1) {
            color2 = pick_color(shape2);
            if (++guard > 1000) throw DataError("shapes dataset: failed to draw distinct colors");
        }

        const int S = vocab.image_size;
        float r1 = static_cast<float>(rng.uniform(vocab.min_radius, vocab.max_radius));
        float r2 = static_cast<float>(rng.uniform(vocab.min_radius, vocab.max_radius));
        float cx1 = 0, cy1 = 0, cx2 = 0, cy2 = 0;
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
            cx1 = static_cast<float>(rng.uniform(r1 + 1, S - r1 - 1));
            cy1 = static_cast<float>(rng.uniform(r1 + 1, S - r1 - 1));
            cx2 = static_cast<float>(rng.uniform(r2 + 1, S - r2 - 1));
            cy2 = static_cast<float>(rng.uniform(r2 + 1, S - r2 - 1));
            // axis-aligned boxes with a 2px gap must not intersect
            placed = std::fabs(cx1 - cx2) > r1 + r2 + 2 || std::fabs(cy1 - cy2) > r1 + r2 + 2;
        }
        if (!placed) throw DataError("shapes dataset: could not place two shapes without overlap");

        s.image = Image(S, S, vocab.background);
        draw_shape(s.image, vocab.shapes[shape1], cx1, cy1, r1, vocab.colors[color1].second);
        draw_shape(s.image, vocab.shapes[shape2], cx2, cy2, r2, vocab.colors[color2].second);

        s.regions.push_back({static_cast<int>(cx1 - r1), static_cast<int>(cy1 - r1),
                             static_cast<int>(cx1 + r1), static_cast<int>(cy1 + r1),
                             vocab.shapes[shape1], vocab.colors[color1].first});
        s.regions.push_back({static_cast<int>(cx2 - r2), static_cast<int>(cy2 - r2),
                             static_cast<int>(cx2 + r2), static_cast<int>(cy2 + r2),
                             vocab.shapes[shape2], vocab.colors[color2].first});

        Quadruplet q{vocab.colors[color1].first, vocab.shapes[shape1], vocab.colors[color2].first,
                     vocab.shapes[shape2]};
        AdversarialPair pair = make_adversarial_pair(q);
        s.caption            = pair.sentence;
        s.graph              = pair.graph;
        // horizontal arrangement becomes a relation; ambiguous layouts stay
        // unlabeled, which exercises the obscured-relation path
        float dx = cx2 - cx1, dy = cy2 - cy1;
        if (std::fabs(dx) >= std::fabs(dy) + 2.f) s.graph.relation = dx > 0 ? "left of" : "right of";
    } catch (const std::exception& e) {
        errors[i] = e.what();  // rethrown outside the parallel region
    }
    for (const auto& e : errors)
        if (!e.empty()) throw DataError("shapes dataset: " + e);
    return out;
}

SceneGraphCorpus corpus_from_samples(const std::vector<ShapesSample>& samples) {
    SceneGraphCorpus corpus;
    corpus.graphs.reserve(samples.size());
    for (const auto& s : samples) corpus.graphs.push_back(s.graph);
    return corpus;
}

void save_dataset(const std::vector<ShapesSample>& samples, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ostringstream meta;
    for (size_t i = 0; i < samples.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "img_%05zu.png", i);
        write_png((fs::path(dir) / name).string(), samples[i].image);
        json line;
        line["file"]    = name;
        line["caption"] = samples[i].caption;
        line["graph"]   = graph_to_json(samples[i].graph);
        json regions    = json::array();
        for (const auto& r : samples[i].regions)
            regions.push_back({{"box", {r.x0, r.y0, r.x1, r.y1}}, {"shape", r.shape}, {"color", r.color}});
        line["regions"] = regions;
        line["seed"]    = samples[i].sample_seed;
        meta << line.dump() << "\n";
    }
    atomic_write_text((fs::path(dir) / "meta.jsonl").string(), meta.str());
}

std::vector<ShapesSample> load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream in(fs::path(dir) / "meta.jsonl");
    if (!in) throw DataError("dataset: missing meta.jsonl in " + dir);
    std::vector<ShapesSample> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw SchemaError(std::string("dataset meta.jsonl: ") + e.what());
        }
        ShapesSample s;
        s.image   = read_png((fs::path(dir) / j.at("file").get<std::string>()).string());
        s.caption = j.at("caption").get<std::string>();
        s.graph   = graph_from_json(j.at("graph"));
        for (const auto& r : j.value("regions", json::array())) {
            RegionTruth rt;
            rt.x0    = r.at("box")[0].get<int>();
            rt.y0    = r.at("box")[1].get<int>();
            rt.x1    = r.at("box")[2].get<int>();
            rt.y1    = r.at("box")[3].get<int>();
            rt.shape = r.at("shape").get<std::string>();
            rt.color = r.at("color").get<std::string>();
            s.regions.push_back(std::move(rt));
        }
        s.sample_seed = j.value("seed", 0ull);
        out.push_back(std::move(s));
    }
    return out;
}

// ------------------------------------------------------------------ oracle

namespace {

struct Palette {
    std::vector<Rgb> entries;  // entry 0 = background
    std::vector<std::string> names;

    int classify(const Rgb& c) const {
        int best   = 0;
        float dmin = 1e9f;
        for (size_t i = 0; i < entries.size(); ++i) {
            float d = 0;
            for (int k = 0; k < 3; ++k) d += (c[k] - entries[i][k]) * (c[k] - entries[i][k]);
            if (d < dmin) {
                dmin = d;
                best = static_cast<int>(i);
            }
        }
        return best;
    }
};

Palette make_palette(const ShapesVocab& vocab) {
    Palette p;
    p.entries.push_back(vocab.background);
    p.names.push_back("");
    for (const auto& [n, c] : vocab.colors) {
        p.entries.push_back(c);
        p.names.push_back(n);
    }
    return p;
}

struct Blob {
    std::vector<int> pixels;  // linear indices
    int x0 = 1 << 30, y0 = 1 << 30, x1 = -1, y1 = -1;
    std::vector<int> color_hist;  // palette-label counts

    int area() const { return static_cast<int>(pixels.size()); }
    int dominant_color() const {
        int best = 1, n = -1;
        for (size_t i = 1; i < color_hist.size(); ++i)
            if (color_hist[i] > n) {
                n    = color_hist[i];
                best = static_cast<int>(i);
            }
        return best;
    }
};

struct ShapeFeatures {
    float fill = 0, bottom_heavy = 0, corner_fill = 0;
};

ShapeFeatures blob_features(const std::vector<bool>& mask, int x0, int y0, int x1, int y1, int width) {
    ShapeFeatures f;
    int bw = x1 - x0 + 1, bh = y1 - y0 + 1;
    int area = 0, bottom = 0, top = 0, corners = 0, corner_cells = 0;
    float cy = (y0 + y1) / 2.f;
    int qx = std::max(1, bw / 3), qy = std::max(1, bh / 3);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            bool in = mask[y * width + x];
            bool corner_cell = (x < x0 + qx || x > x1 - qx) && (y < y0 + qy || y > y1 - qy);
            if (corner_cell) {
                ++corner_cells;
                if (in) ++corners;
            }
            if (!in) continue;
            ++area;
            if (y > cy) ++bottom;
            else if (y < cy) ++top;
        }
    f.fill         = static_cast<float>(area) / static_cast<float>(bw * bh);
    f.bottom_heavy = area ? static_cast<float>(bottom - top) / area : 0.f;
    f.corner_fill  = corner_cells ? static_cast<float>(corners) / corner_cells : 0.f;
    return f;
}

float feature_distance(const ShapeFeatures& a, const ShapeFeatures& b) {
    float d = 0;
    d += (a.fill - b.fill) * (a.fill - b.fill);
    d += (a.bottom_heavy - b.bottom_heavy) * (a.bottom_heavy - b.bottom_heavy);
    d += (a.corner_fill - b.corner_fill) * (a.corner_fill - b.corner_fill);
    return d;
}

// descriptor of a cleanly rendered prototype, cached per shape name
const ShapeFeatures& shape_prototype(const std::string& shape) {
    static std::map<std::string, ShapeFeatures> cache = [] {
        std::map<std::string, ShapeFeatures> m;
        for (const char* name : {"square", "circle", "triangle", "cross"}) {
            Image img(24, 24, {0, 0, 0});
            draw_shape(img, name, 12.f, 12.f, 7.f, {1, 1, 1});
            std::vector<bool> mask(24 * 24, false);
            int x0 = 24, y0 = 24, x1 = -1, y1 = -1;
            for (int y = 0; y < 24; ++y)
                for (int x = 0; x < 24; ++x)
                    if (img.get(x, y)[0] > 0.5f) {
                        mask[y * 24 + x] = true;
                        x0 = std::min(x0, x); x1 = std::max(x1, x);
                        y0 = std::min(y0, y); y1 = std::max(y1, y);
                    }
            m[name] = blob_features(mask, x0, y0, x1, y1, 24);
        }
        return m;
    }();
    auto it = cache.find(shape);
    if (it == cache.end()) throw ParamError("unknown shape '" + shape + "'");
    return it->second;
}

std::vector<Blob> find_blobs(const std::vector<int>& labels, int width, int height, int palette_size) {
    std::vector<Blob> blobs;
    std::vector<int> owner(labels.size(), -1);
    for (int start = 0; start < static_cast<int>(labels.size()); ++start) {
        if (labels[start] == 0 || owner[start] >= 0) continue;
        Blob b;
        b.color_hist.assign(palette_size, 0);
        std::vector<int> stack{start};
        owner[start] = static_cast<int>(blobs.size());
        while (!stack.empty()) {
            int p = stack.back();
            stack.pop_back();
            b.pixels.push_back(p);
            int x = p % width, y = p / width;
            b.x0 = std::min(b.x0, x); b.x1 = std::max(b.x1, x);
            b.y0 = std::min(b.y0, y); b.y1 = std::max(b.y1, y);
            ++b.color_hist[labels[p]];
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    if (!dx && !dy) continue;
                    int nx = x + dx, ny = y + dy;
                    if (nx < 0 || nx >= width || ny < 0 || ny >= height) continue;
                    int q = ny * width + nx;
                    if (labels[q] != 0 && owner[q] < 0) {
                        owner[q] = owner[start];
                        stack.push_back(q);
                    }
                }
        }
        blobs.push_back(std::move(b));
    }
    return blobs;
}

}  // namespace

OracleResult binding_oracle(const Image& image, const EvalGraph& graph, const ShapesVocab& vocab,
                            const std::vector<RegionTruth>* truth) {
    graph.validate();
    if (image.width != vocab.image_size || image.height != vocab.image_size)
        throw ShapeError("binding oracle: image is " + std::to_string(image.width) + "x" +
                         std::to_string(image.height) + ", expected " + std::to_string(vocab.image_size));
    if (graph.attrs1.empty() || graph.attrs2.empty())
        throw ParamError("binding oracle: both objects need a color attribute");
    Palette palette = make_palette(vocab);
    auto color_index = [&](const std::string& name) {
        for (size_t i = 1; i < palette.names.size(); ++i)
            if (palette.names[i] == name) return static_cast<int>(i);
        throw ParamError("binding oracle: color '" + name + "' is not in the rendering palette");
    };
    const int want1 = color_index(graph.attrs1[0]);
    const int want2 = color_index(graph.attrs2[0]);

    const int W = image.width, H = image.height;
    std::vector<int> labels(static_cast<size_t>(W) * H);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) labels[y * W + x] = palette.classify(image.get(x, y));

    OracleResult res;
    auto leak_threshold = [](int area) { return std::max(2, (area + 11) / 12); };

    if (truth) {
        if (truth->size() != 2) throw ParamError("binding oracle: expected two ground-truth regions");
        for (int i = 0; i < 2; ++i) {
            const RegionTruth& r = (*truth)[i];
            int want = i == 0 ? want1 : want2;
            int other = i == 0 ? want2 : want1;
            std::vector<int> hist(palette.entries.size(), 0);
            for (int y = std::max(0, r.y0); y <= std::min(H - 1, r.y1); ++y)
                for (int x = std::max(0, r.x0); x <= std::min(W - 1, r.x1); ++x) ++hist[labels[y * W + x]];
            int colored = 0;
            for (size_t k = 1; k < hist.size(); ++k) colored += hist[k];
            bool present = colored >= 4;
            int dominant = 1;
            for (size_t k = 2; k < hist.size(); ++k)
                if (hist[k] > hist[dominant]) dominant = static_cast<int>(k);
            bool correct = present && dominant == want;
            bool leak    = present && hist[other] >= leak_threshold(colored);
            if (i == 0) { res.obj1_present = present; res.obj1_correct = correct; res.leak1 = leak; }
            else { res.obj2_present = present; res.obj2_correct = correct; res.leak2 = leak; }
        }
        return res;
    }

    auto blobs = find_blobs(labels, W, H, static_cast<int>(palette.entries.size()));
    std::sort(blobs.begin(), blobs.end(), [](const Blob& a, const Blob& b) { return a.area() > b.area(); });
    std::vector<Blob> kept;
    for (auto& b : blobs) {
        if (b.area() < 6) break;
        kept.push_back(std::move(b));
        if (kept.size() == 4) break;
    }
    if (kept.empty()) return res;

    std::vector<ShapeFeatures> feats;
    std::vector<std::vector<bool>> masks;
    for (const auto& b : kept) {
        std::vector<bool> mask(static_cast<size_t>(W) * H, false);
        for (int p : b.pixels) mask[p] = true;
        feats.push_back(blob_features(mask, b.x0, b.y0, b.x1, b.y1, W));
        masks.push_back(std::move(mask));
    }
    const ShapeFeatures& proto1 = shape_prototype(graph.obj1);
    const ShapeFeatures& proto2 = shape_prototype(graph.obj2);

    int pick1 = -1, pick2 = -1;
    if (kept.size() == 1) {
        if (feature_distance(feats[0], proto1) <= feature_distance(feats[0], proto2)) pick1 = 0;
        else pick2 = 0;
    } else {
        float best = 1e9f;
        for (size_t a = 0; a < kept.size(); ++a)
            for (size_t b = 0; b < kept.size(); ++b) {
                if (a == b) continue;
                float d = feature_distance(feats[a], proto1) + feature_distance(feats[b], proto2);
                if (d < best) {
                    best  = d;
                    pick1 = static_cast<int>(a);
                    pick2 = static_cast<int>(b);
                }
            }
    }

    auto judge = [&](int pick, int want, int other, bool& present, bool& correct, bool& leak) {
        if (pick < 0) return;
        const Blob& b = kept[pick];
        present       = true;
        correct       = b.dominant_color() == want;
        leak          = b.color_hist[other] >= leak_threshold(b.area());
    };
    judge(pick1, want1, want2, res.obj1_present, res.obj1_correct, res.leak1);
    judge(pick2, want2, want1, res.obj2_present, res.obj2_correct, res.leak2);
    return res;
}

}  // namespace synbind
