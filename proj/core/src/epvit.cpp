#include "synbind/epvit.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "synbind/syntax.hpp"

namespace synbind {

using nlohmann::json;

static int index_in(const std::vector<std::string>& names, const std::string& name, const char* kind) {
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw DataError(std::string(kind) + " label '" + name + "' is not in the label space");
    return static_cast<int>(it - names.begin());
}

int LabelSpaces::relation_index(const std::string& name) const { return index_in(relations, name, "relation"); }
int LabelSpaces::attribute_index(const std::string& name) const { return index_in(attributes, name, "attribute"); }
int LabelSpaces::object_index(const std::string& name) const { return index_in(objects, name, "object"); }

void LabelSpaces::save(const std::string& path) const {
    json j;
    j["relations"]  = relations;
    j["attributes"] = attributes;
    j["objects"]    = objects;
    atomic_write_text(path, j.dump(2));
}

LabelSpaces LabelSpaces::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open label-space manifest: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw SchemaError(std::string("label-space manifest: ") + e.what());
    }
    LabelSpaces ls;
    ls.relations  = j.value("relations", std::vector<std::string>{});
    ls.attributes = j.value("attributes", std::vector<std::string>{});
    ls.objects    = j.value("objects", std::vector<std::string>{});
    return ls;
}

Vec inject_objects(const Vec& ce, const Vec& obj1, const Vec& obj2, float alpha, float beta,
                   const Mat& w, const Vec& b) {
    if (w.rows() != obj1.size() + obj2.size())
        throw ShapeError("inject_objects: W expects " + std::to_string(w.rows()) + " inputs, got " +
                         std::to_string(obj1.size() + obj2.size()));
    if (w.cols() != ce.size() || b.size() != ce.size())
        throw ShapeError("inject_objects: W/b output width must match the class embedding");
    Vec cat(obj1.size() + obj2.size());
    cat << obj1, obj2;
    Vec lin = w.transpose() * cat + b;
    return ce + alpha * lin + Vec::Constant(ce.size(), beta);
}

EPViTModel::EPViTModel(const EPViTConfig& cfg, LabelSpaces labels, std::shared_ptr<TextEncoderHandle> text,
                       uint64_t seed)
    : cfg_(cfg), labels_(std::move(labels)), text_(std::move(text)) {
    if (static_cast<int>(labels_.relations.size()) > cfg.n_rel ||
        static_cast<int>(labels_.attributes.size()) > cfg.n_attr ||
        static_cast<int>(labels_.objects.size()) > cfg.n_obj)
        throw ParamError("epvit: label spaces exceed the configured head sizes");
    net_ = std::make_shared<EPViTNet<float>>(cfg, seed);
}

Vec EPViTModel::object_embedding(const std::string& name) const {
    auto it = embed_cache_.find(name);
    if (it != embed_cache_.end()) return it->second;
    auto ids = Vocabulary::builtin().encode_word(name);
    ids.push_back(Vocabulary::builtin().eos_id());
    Vec e = text_->pooled(ids);
    if (e.size() != cfg_.obj_embed_dim)
        throw ShapeError("epvit: pooled text embedding width does not match obj_embed_dim");
    embed_cache_.emplace(name, e);
    return e;
}

EPViTOutputs EPViTModel::forward(const Image& image, const std::string& obj1_name,
                                 const std::string& obj2_name) const {
    Vec e1 = object_embedding(obj1_name);
    Vec e2 = object_embedding(obj2_name);
    Tape<float> tape;
    Binder<float> bind(tape);
    auto nodes = net_->forward(tape, bind, image.to_mat_pm1(), e1.transpose(), e2.transpose());
    EPViTOutputs out;
    out.rel_logits   = tape.val(nodes.rel).row(0).transpose();
    out.attr1_logits = tape.val(nodes.attr1).row(0).transpose();
    out.attr2_logits = tape.val(nodes.attr2).row(0).transpose();
    out.obj1_logits  = tape.val(nodes.obj1).row(0).transpose();
    out.obj2_logits  = tape.val(nodes.obj2).row(0).transpose();
    return out;
}

void EPViTModel::init_backbone_from(const ParamStore<float>& src) {
    for (auto& p : net_->store().all()) {
        if (p.name.rfind("vision.", 0) != 0) continue;
        for (const auto& q : src.all()) {
            if (q.name == p.name) {
                if (q.w.rows() != p.w.rows() || q.w.cols() != p.w.cols())
                    throw ShapeError("epvit init: shape mismatch for " + p.name);
                p.w = q.w;
                break;
            }
        }
    }
}

static double log_sigmoid(double z) { return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z)); }

double score_graph(const EPViTModel& model, const Image& image, const EvalGraph& graph) {
    graph.validate();
    if (graph.attrs1.empty() && graph.attrs2.empty() && !graph.relation)
        throw ParamError("score_graph: graph has neither attributes nor a relation");
    EPViTOutputs out = model.forward(image, graph.obj1, graph.obj2);
    const auto& ls   = model.labels();

    double total = 0.0;
    int count    = 0;
    for (const auto& a : graph.attrs1) {
        total += log_sigmoid(out.attr1_logits(ls.attribute_index(a)));
        ++count;
    }
    for (const auto& a : graph.attrs2) {
        total += log_sigmoid(out.attr2_logits(ls.attribute_index(a)));
        ++count;
    }
    if (graph.relation) {
        int idx      = ls.relation_index(*graph.relation);
        double m     = out.rel_logits.maxCoeff();
        double lse   = 0.0;
        for (int i = 0; i < out.rel_logits.size(); ++i) lse += std::exp(out.rel_logits(i) - m);
        total += out.rel_logits(idx) - m - std::log(lse);
        ++count;
    }
    return total / count;
}

double epvit_accuracy(const std::vector<ScoredPair>& pairs, const EPViTModel& model) {
    if (pairs.empty()) throw ParamError("epvit_accuracy: no pairs given");
    int wins = 0;
    for (const auto& p : pairs) {
        double correct = score_graph(model, *p.image, p.graph);
        double adv     = score_graph(model, *p.image, p.adversarial_graph);
        if (correct > adv) ++wins;  // ties count as failures
    }
    return 100.0 * wins / static_cast<double>(pairs.size());
}

std::vector<TrainLogEntry> train_epvit(EPViTModel& model, const std::vector<EPViTTrainSample>& dataset,
                                       const EPViTTrainConfig& cfg) {
    if (dataset.empty()) throw DataError("epvit training: empty dataset");
    AdamOptimizer<float> opt;
    opt.lr = cfg.lr;
    Rng rng(mix_seed(cfg.seed, 0xe9a2));
    std::vector<TrainLogEntry> log;

    auto& net = model.net();
    for (int step = 0; step < cfg.steps; ++step) {
        Tape<float> tape;
        Binder<float> bind(tape);
        std::vector<int> losses;
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& s = dataset[rng.uniform_index(dataset.size())];
            Vec e1        = model.object_embedding(s.obj1_name);
            Vec e2        = model.object_embedding(s.obj2_name);
            auto nodes    = net.forward(tape, bind, s.image->to_mat_pm1(), e1.transpose(), e2.transpose());
            losses.push_back(net.loss(tape, nodes, s.labels));
        }
        int total = losses[0];
        for (size_t i = 1; i < losses.size(); ++i) total = tape.add(total, losses[i]);
        total = tape.scale(total, 1.f / static_cast<float>(cfg.batch));
        tape.backward(total);
        bind.pull_grads();
        float value = tape.val(total)(0, 0);
        opt.update(net.store());
        if (step % cfg.log_every == 0 || step + 1 == cfg.steps) log.push_back({step, value});
    }
    return log;
}

void EPViTModel::save(const std::string& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    json meta;
    meta["kind"] = "epvit";
    const auto& v = cfg_.backbone;
    meta["backbone"] = {{"image_size", v.image_size}, {"patch", v.patch},   {"dim", v.dim},
                        {"heads", v.heads},           {"layers", v.layers}, {"mlp_mult", v.mlp_mult},
                        {"joint_dim", v.joint_dim}};
    meta["obj_embed_dim"] = cfg_.obj_embed_dim;
    meta["n_rel"]         = cfg_.n_rel;
    meta["n_attr"]        = cfg_.n_attr;
    meta["n_obj"]         = cfg_.n_obj;
    meta["param_count"]   = net_->store().scalar_count();
    atomic_write_text((fs::path(dir) / "manifest.json").string(), meta.dump(2));
    labels_.save((fs::path(dir) / "labels.json").string());
    auto blob = net_->store().serialize();
    write_f32_file((fs::path(dir) / "params.f32").string(), blob.data(), blob.size());
}

EPViTModel EPViTModel::load(const std::string& dir, std::shared_ptr<TextEncoderHandle> text) {
    namespace fs = std::filesystem;
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in) throw DataError("epvit checkpoint: missing manifest.json in " + dir);
    json meta;
    try {
        in >> meta;
    } catch (const json::exception& e) {
        throw SchemaError(std::string("epvit checkpoint manifest: ") + e.what());
    }
    if (meta.value("kind", std::string()) != "epvit")
        throw SchemaError("checkpoint in " + dir + " is not an epvit checkpoint");

    EPViTConfig cfg;
    const auto& v = meta.at("backbone");
    cfg.backbone  = {v.at("image_size").get<int>(), v.at("patch").get<int>(),    v.at("dim").get<int>(),
                     v.at("heads").get<int>(),      v.at("layers").get<int>(),   v.at("mlp_mult").get<int>(),
                     v.at("joint_dim").get<int>()};
    cfg.obj_embed_dim = meta.at("obj_embed_dim").get<int>();
    cfg.n_rel         = meta.at("n_rel").get<int>();
    cfg.n_attr        = meta.at("n_attr").get<int>();
    cfg.n_obj         = meta.at("n_obj").get<int>();

    LabelSpaces ls = LabelSpaces::load((fs::path(dir) / "labels.json").string());
    EPViTModel model(cfg, std::move(ls), std::move(text), 0);
    model.net_->store().deserialize(read_f32_file((fs::path(dir) / "params.f32").string()));
    return model;
}

}  // namespace synbind
