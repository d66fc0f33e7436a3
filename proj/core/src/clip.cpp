#include "synbind/clip.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace synbind {

using nlohmann::json;

ClipModel::ClipModel(const ClipConfig& cfg, uint64_t seed) : cfg_(cfg) {
    store_ = std::make_shared<ParamStore<float>>();
    Rng rng(mix_seed(seed, 0xc11b));
    text_   = std::make_shared<TextEncoder<float>>(cfg.text, *store_, rng, "text");
    vision_ = std::make_shared<ViT<float>>(cfg.vision, *store_, rng, "vision");
    logit_scale_ = store_->create("logit_scale", 1, 1);
    logit_scale_->w(0, 0) = cfg.logit_scale_init;
}

Vec ClipModel::embed_image(const Image& img) const {
    Tape<float> tape;
    Binder<float> bind(tape);
    int rows   = tape.input(img.to_mat_pm1());
    int pooled = tape.l2_normalize_rows(vision_->forward_pooled(tape, bind, rows));
    return tape.val(pooled).row(0).transpose();
}

Vec ClipModel::embed_text(const std::vector<int>& token_ids) const {
    Tape<float> tape;
    Binder<float> bind(tape);
    int pooled = tape.l2_normalize_rows(text_->forward_pooled(tape, bind, token_ids));
    return tape.val(pooled).row(0).transpose();
}

float ClipModel::similarity(const Image& img, const std::vector<int>& token_ids) const {
    return embed_image(img).dot(embed_text(token_ids));
}

float ClipModel::train_step(const std::vector<const Image*>& images,
                            const std::vector<const std::vector<int>*>& token_ids,
                            AdamOptimizer<float>& opt) {
    const int batch = static_cast<int>(images.size());
    if (batch < 2) throw ParamError("clip training needs at least two pairs per batch");
    if (token_ids.size() != images.size()) throw ShapeError("clip: one caption per image required");

    Tape<float> tape;
    Binder<float> bind(tape);

    std::vector<int> img_rows, txt_rows;
    for (int b = 0; b < batch; ++b) {
        int rows = tape.input(images[b]->to_mat_pm1());
        img_rows.push_back(vision_->forward_pooled(tape, bind, rows));
        txt_rows.push_back(text_->forward_pooled(tape, bind, *token_ids[b]));
    }
    int img_emb = tape.l2_normalize_rows(tape.concat_rows(img_rows));
    int txt_emb = tape.l2_normalize_rows(tape.concat_rows(txt_rows));
    int logits  = tape.scale_by(tape.matmul(img_emb, txt_emb, false, true), bind(logit_scale_));

    std::vector<int> labels(batch);
    std::vector<float> weights(batch, 1.f);
    for (int b = 0; b < batch; ++b) labels[b] = b;
    int loss_i2t = tape.cross_entropy_logits(logits, labels, weights);
    int loss_t2i = tape.cross_entropy_logits(tape.transpose(logits), labels, weights);
    int loss     = tape.scale(tape.add(loss_i2t, loss_t2i), 0.5f / static_cast<float>(batch));

    tape.backward(loss);
    bind.pull_grads();
    float value = tape.val(loss)(0, 0);
    opt.update(*store_);
    // a negative temperature would flip the contrastive objective
    if (logit_scale_->w(0, 0) < 1.f) logit_scale_->w(0, 0) = 1.f;
    return value;
}

std::shared_ptr<TextEncoderHandle> ClipModel::frozen_text() const {
    return std::make_shared<FrozenTextEncoder>(store_, text_);
}

void ClipModel::save(const std::string& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    json meta;
    meta["kind"] = "clip";
    meta["text"] = {{"vocab_size", cfg_.text.vocab_size}, {"dim", cfg_.text.dim},
                    {"heads", cfg_.text.heads},           {"layers", cfg_.text.layers},
                    {"mlp_mult", cfg_.text.mlp_mult},     {"max_len", cfg_.text.max_len},
                    {"joint_dim", cfg_.text.joint_dim}};
    meta["vision"] = {{"image_size", cfg_.vision.image_size}, {"patch", cfg_.vision.patch},
                      {"dim", cfg_.vision.dim},               {"heads", cfg_.vision.heads},
                      {"layers", cfg_.vision.layers},         {"mlp_mult", cfg_.vision.mlp_mult},
                      {"joint_dim", cfg_.vision.joint_dim}};
    meta["logit_scale_init"] = cfg_.logit_scale_init;
    meta["param_count"]      = store_->scalar_count();
    atomic_write_text((fs::path(dir) / "manifest.json").string(), meta.dump(2));
    auto blob = store_->serialize();
    write_f32_file((fs::path(dir) / "params.f32").string(), blob.data(), blob.size());
}

ClipModel ClipModel::load(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in) throw DataError("clip checkpoint: missing manifest.json in " + dir);
    json meta;
    try {
        in >> meta;
    } catch (const json::exception& e) {
        throw SchemaError(std::string("clip checkpoint manifest: ") + e.what());
    }
    if (meta.value("kind", std::string()) != "clip")
        throw SchemaError("checkpoint in " + dir + " is not a clip checkpoint");

    ClipConfig cfg;
    const auto& t   = meta.at("text");
    cfg.text        = {t.at("vocab_size").get<int>(), t.at("dim").get<int>(),     t.at("heads").get<int>(),
                       t.at("layers").get<int>(),     t.at("mlp_mult").get<int>(), t.at("max_len").get<int>(),
                       t.at("joint_dim").get<int>()};
    const auto& v   = meta.at("vision");
    cfg.vision      = {v.at("image_size").get<int>(), v.at("patch").get<int>(),    v.at("dim").get<int>(),
                       v.at("heads").get<int>(),      v.at("layers").get<int>(),   v.at("mlp_mult").get<int>(),
                       v.at("joint_dim").get<int>()};
    cfg.logit_scale_init = meta.value("logit_scale_init", 14.f);

    ClipModel model(cfg, /*seed=*/0);
    model.store_->deserialize(read_f32_file((fs::path(dir) / "params.f32").string()));
    return model;
}

}  // namespace synbind
