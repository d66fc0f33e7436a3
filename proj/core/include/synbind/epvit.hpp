#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "synbind/graph.hpp"
#include "synbind/image.hpp"
#include "synbind/text_encoder.hpp"
#include "synbind/vit.hpp"

namespace synbind {

// Ordered class names for relations, attributes and objects. The on-disk
// manifest pins the ordering so head indices stay stable across runs.
struct LabelSpaces {
    std::vector<std::string> relations;
    std::vector<std::string> attributes;
    std::vector<std::string> objects;

    int relation_index(const std::string& name) const;
    int attribute_index(const std::string& name) const;
    int object_index(const std::string& name) const;

    void save(const std::string& path) const;
    static LabelSpaces load(const std::string& path);
};

struct EPViTConfig {
    ViTConfig backbone;
    int obj_embed_dim = 64;
    // label-space sizes at the scale the reference model was trained
    // (relations/attributes capped at 100, objects at 200); desk-scale
    // configs shrink these to the synthetic vocabulary
    int n_rel  = 100;
    int n_attr = 100;
    int n_obj  = 200;
};

struct EPViTOutputs {
    Vec rel_logits;
    Vec attr1_logits, attr2_logits;  // independent binary classifiers
    Vec obj1_logits, obj2_logits;
};

// Per-sample training labels; rel < 0 or an empty attribute list obscures
// the corresponding loss term completely.
struct EPViTLabels {
    int obj1 = -1, obj2 = -1;
    std::vector<int> attrs1, attrs2;
    int rel = -1;
};

// ce + alpha * (W concat(obj1, obj2) + b) + beta, evaluated directly.
Vec inject_objects(const Vec& ce, const Vec& obj1, const Vec& obj2, float alpha, float beta,
                   const Mat& w, const Vec& b);

// Backbone plus conditioning injection and the five classification heads.
// Templated so finite-difference checks can instantiate it in double.
template <class T>
class EPViTNet {
public:
    EPViTNet(const EPViTConfig& cfg, uint64_t seed) : cfg_(cfg) {
        cfg.backbone.validate();
        store_ = std::make_shared<ParamStore<T>>();
        Rng rng(mix_seed(seed, 0xe9f1));
        backbone_ = std::make_shared<ViT<T>>(cfg.backbone, *store_, rng, "vision");
        obj_proj_ = Linear<T>(*store_, "inject.obj_proj", 2 * cfg.obj_embed_dim, cfg.backbone.dim, rng);
        alpha_    = store_->create("inject.alpha", 1, 1);  // zero init keeps the backbone intact
        beta_     = store_->create("inject.beta", 1, 1);
        head_rel_   = Linear<T>(*store_, "head.rel", cfg.backbone.dim, cfg.n_rel, rng);
        head_attr1_ = Linear<T>(*store_, "head.attr1", cfg.backbone.dim, cfg.n_attr, rng);
        head_attr2_ = Linear<T>(*store_, "head.attr2", cfg.backbone.dim, cfg.n_attr, rng);
        head_obj1_  = Linear<T>(*store_, "head.obj1", cfg.backbone.dim, cfg.n_obj, rng);
        head_obj2_  = Linear<T>(*store_, "head.obj2", cfg.backbone.dim, cfg.n_obj, rng);
    }

    const EPViTConfig& config() const { return cfg_; }
    ParamStore<T>& store() { return *store_; }
    std::shared_ptr<ParamStore<T>> store_ptr() { return store_; }
    Param<T>* alpha() { return alpha_; }
    Param<T>* beta() { return beta_; }
    const ViT<T>& backbone() const { return *backbone_; }

    struct Nodes {
        int features = -1;  // backbone token features (1+patches) x dim
        int pooled   = -1;  // class-token row
        int rel = -1, attr1 = -1, attr2 = -1, obj1 = -1, obj2 = -1;
    };

    // image_rows: (S*S) x 3; obj embeddings: 1 x obj_embed_dim constants
    Nodes forward(Tape<T>& t, Binder<T>& bind, const MatT<T>& image_rows, const MatT<T>& obj1_emb,
                  const MatT<T>& obj2_emb) const {
        if (obj1_emb.cols() != cfg_.obj_embed_dim || obj2_emb.cols() != cfg_.obj_embed_dim)
            throw ShapeError("epvit: object embedding width does not match obj_embed_dim");
        Nodes n;
        int img    = t.input(image_rows);
        int objcat = t.input((MatT<T>(1, 2 * cfg_.obj_embed_dim) << obj1_emb.row(0), obj2_emb.row(0)).finished());
        int inj    = obj_proj_.forward(t, bind, objcat);
        int ce     = t.add(bind(backbone_->class_embedding()), t.scale_by(inj, bind(alpha_)));
        ce         = t.add_scalar_bias(ce, bind(beta_));
        n.features = backbone_->forward_features(t, bind, img, ce);
        n.pooled   = t.slice_rows(n.features, 0, 1);
        n.rel      = head_rel_.forward(t, bind, n.pooled);
        n.attr1    = head_attr1_.forward(t, bind, n.pooled);
        n.attr2    = head_attr2_.forward(t, bind, n.pooled);
        n.obj1     = head_obj1_.forward(t, bind, n.pooled);
        n.obj2     = head_obj2_.forward(t, bind, n.pooled);
        return n;
    }

    // Summed loss node over one sample's heads. Absent relation/attribute
    // labels contribute no node at all, so their gradient is exactly zero.
    int loss(Tape<T>& t, const Nodes& n, const EPViTLabels& labels) const {
        if (labels.obj1 < 0 || labels.obj1 >= cfg_.n_obj || labels.obj2 < 0 || labels.obj2 >= cfg_.n_obj)
            throw ParamError("epvit loss: object label outside class space");
        std::vector<int> parts;
        parts.push_back(t.cross_entropy_logits(n.obj1, {labels.obj1}, {T(1)}));
        parts.push_back(t.cross_entropy_logits(n.obj2, {labels.obj2}, {T(1)}));
        if (labels.rel >= 0) {
            if (labels.rel >= cfg_.n_rel) throw ParamError("epvit loss: relation label outside class space");
            parts.push_back(t.cross_entropy_logits(n.rel, {labels.rel}, {T(1)}));
        }
        auto multi_hot = [&](const std::vector<int>& idx) {
            MatT<T> m = MatT<T>::Zero(1, cfg_.n_attr);
            for (int i : idx) {
                if (i < 0 || i >= cfg_.n_attr) throw ParamError("epvit loss: attribute label outside class space");
                m(0, i) = T(1);
            }
            return m;
        };
        if (!labels.attrs1.empty()) parts.push_back(t.bce_logits(n.attr1, multi_hot(labels.attrs1), {T(1)}));
        if (!labels.attrs2.empty()) parts.push_back(t.bce_logits(n.attr2, multi_hot(labels.attrs2), {T(1)}));
        int total = parts[0];
        for (size_t i = 1; i < parts.size(); ++i) total = t.add(total, parts[i]);
        return total;
    }

private:
    EPViTConfig cfg_;
    std::shared_ptr<ParamStore<T>> store_;
    std::shared_ptr<ViT<T>> backbone_;
    Linear<T> obj_proj_;
    Param<T>* alpha_ = nullptr;
    Param<T>* beta_  = nullptr;
    Linear<T> head_rel_, head_attr1_, head_attr2_, head_obj1_, head_obj2_;
};

// Float model bound to a frozen text encoder for object-name embeddings
// and a label-space manifest.
class EPViTModel {
public:
    EPViTModel(const EPViTConfig& cfg, LabelSpaces labels, std::shared_ptr<TextEncoderHandle> text,
               uint64_t seed);

    const EPViTConfig& config() const { return cfg_; }
    const LabelSpaces& labels() const { return labels_; }
    EPViTNet<float>& net() { return *net_; }
    const EPViTNet<float>& net() const { return *net_; }
    TextEncoderHandle& text() const { return *text_; }

    Vec object_embedding(const std::string& name) const;  // pooled, cached
    EPViTOutputs forward(const Image& image, const std::string& obj1_name,
                         const std::string& obj2_name) const;

    // initialize backbone weights from a matching pretrained store
    void init_backbone_from(const ParamStore<float>& src);

    void save(const std::string& dir) const;
    static EPViTModel load(const std::string& dir, std::shared_ptr<TextEncoderHandle> text);

private:
    EPViTConfig cfg_;
    LabelSpaces labels_;
    std::shared_ptr<TextEncoderHandle> text_;
    std::shared_ptr<EPViTNet<float>> net_;
    mutable std::map<std::string, Vec> embed_cache_;
};

// Mean log-likelihood of the graph's attributes (log-sigmoid of the binary
// heads) and relation (log-softmax); object heads are excluded. A graph
// with neither attributes nor a relation has no defined score and throws.
double score_graph(const EPViTModel& model, const Image& image, const EvalGraph& graph);

struct ScoredPair {
    const Image* image = nullptr;
    EvalGraph graph;
    EvalGraph adversarial_graph;
};

// Percentage of pairs whose correct graph scores strictly higher than the
// adversarial one; ties count as failures.
double epvit_accuracy(const std::vector<ScoredPair>& pairs, const EPViTModel& model);

struct EPViTTrainSample {
    const Image* image = nullptr;
    std::string obj1_name, obj2_name;
    EPViTLabels labels;
};

struct EPViTTrainConfig {
    int steps     = 1200;
    int batch     = 32;
    float lr      = 1e-3f;
    uint64_t seed = 1;
    int log_every = 100;
};

std::vector<TrainLogEntry> train_epvit(EPViTModel& model, const std::vector<EPViTTrainSample>& dataset,
                                       const EPViTTrainConfig& cfg);

}  // namespace synbind
