// SPDX-License-Identifier: Apache-2.0
#include "cmmix/config.hpp"

#include <set>

#include "json.hpp"

#include "cmmix/bytes.hpp"

namespace cmmix::config {

using nlohmann::json;

void RunConfig::validate() const {
    model.validate();
    train.validate();
    retrieval.validate();
    if (data.n_clips != model.n_clips)
        throw ConfigError("data.n_clips", "must equal model.n_clips (" + std::to_string(model.n_clips) + ")");
    if (data.image_size != model.image_size)
        throw ConfigError("data.image_size", "must equal model.image_size (" + std::to_string(model.image_size) + ")");
    if (data.sample_rate <= 0) throw ConfigError("data.sample_rate", "must be positive");
    if (!(data.clip_seconds > 0)) throw ConfigError("data.clip_seconds", "must be positive");
    if (data.n_mels == 0) throw ConfigError("data.n_mels", "must be positive");
    if (mixer.kind == mixer::MixerKind::CutMix && mixer.s == 0) throw ConfigError("mixer.s", "must be at least 1");
    if (!(mixer.p >= 0 && mixer.p <= 1)) throw ConfigError("mixer.p", "must lie in [0, 1]");
    if (!(mixer.alpha > 0)) throw ConfigError("mixer.alpha", "must be positive");
}

RunConfig preset(const std::string& name) {
    RunConfig c;
    c.preset = name;
    if (name == "vit_base") return c;
    if (name != "toy") throw ConfigError("preset", "unknown preset '" + name + "' (expected vit_base or toy)");
    c.model = model::ViTConfig::toy();
    c.data.n_clips = c.model.n_clips;
    c.data.image_size = c.model.image_size;
    c.train.epochs = 500;
    c.train.batch_size = 8;
    c.train.warmup_epochs = 25;
    c.train.lr = 4e-3;
    c.retrieval.lr = 5e-4;
    c.retrieval.epochs = 2000;
    c.retrieval.warmup_epochs = 50;
    return c;
}

namespace {

class Section {
public:
    Section(const json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
        if (!doc_.is_object()) throw ConfigError(path_, "must be an object");
    }
    ~Section() noexcept(false) {
        if (std::uncaught_exceptions() > 0) return;
        for (const auto& [key, _] : doc_.items())
            if (!seen_.count(key)) throw ConfigError(path_ + "." + key, "unknown key");
    }

    template <typename V>
    void get(const char* key, V& out) {
        seen_.insert(key);
        if (!doc_.contains(key)) return;
        const json& v = doc_.at(key);
        const std::string where = path_ + "." + key;
        if constexpr (std::is_same_v<V, bool>) {
            if (!v.is_boolean()) throw ConfigError(where, "must be a boolean");
            out = v.get<bool>();
        } else if constexpr (std::is_integral_v<V>) {
            if (!v.is_number_integer()) throw ConfigError(where, "must be an integer");
            if (std::is_unsigned_v<V> && v.get<long long>() < 0) throw ConfigError(where, "must be non-negative");
            out = v.get<V>();
        } else if constexpr (std::is_floating_point_v<V>) {
            if (!v.is_number()) throw ConfigError(where, "must be a number");
            out = v.get<V>();
        } else {
            if (!v.is_string()) throw ConfigError(where, "must be a string");
            out = v.get<V>();
        }
    }

    bool has(const char* key) const { return doc_.contains(key); }
    const json& raw(const char* key) {
        seen_.insert(key);
        return doc_.at(key);
    }
    const std::string& path() const { return path_; }

private:
    const json& doc_;
    std::string path_;
    std::set<std::string> seen_;
};

void read_betas(Section& s, double& b1, double& b2) {
    if (!s.has("betas")) return;
    const json& v = s.raw("betas");
    if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
        throw ConfigError(s.path() + ".betas", "must be a two-number array");
    b1 = v[0].get<double>();
    b2 = v[1].get<double>();
}

}  // namespace

RunConfig parse(const std::string& json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError("", std::string("malformed JSON: ") + e.what());
    }
    if (!doc.is_object()) throw ConfigError("", "top level must be an object");
    std::string preset_name = "vit_base";
    if (doc.contains("preset")) {
        if (!doc["preset"].is_string()) throw ConfigError("preset", "must be a string");
        preset_name = doc["preset"].get<std::string>();
    }
    RunConfig c = preset(preset_name);
    bool lr_given = false;
    bool data_clips_given = false;
    bool data_size_given = false;
    for (const auto& [key, value] : doc.items()) {
        if (key == "preset") continue;
        if (key == "model") {
            Section s(value, "model");
            s.get("enc_depth", c.model.enc_depth);
            s.get("enc_dim", c.model.enc_dim);
            s.get("heads", c.model.heads);
            s.get("mlp_ratio", c.model.mlp_ratio);
            s.get("patch", c.model.patch);
            s.get("image_size", c.model.image_size);
            s.get("n_clips", c.model.n_clips);
            std::string kind = model::to_string(c.model.dec_kind);
            s.get("dec_kind", kind);
            c.model.dec_kind = model::decoder_kind_from_string(kind);
            s.get("dec_depth", c.model.dec_depth);
            s.get("dec_dim", c.model.dec_dim);
            s.get("dec_heads", c.model.dec_heads);
            s.get("solo_split_head", c.model.solo_split_head);
        } else if (key == "data") {
            Section s(value, "data");
            data_clips_given = s.has("n_clips");
            data_size_given = s.has("image_size");
            s.get("sample_rate", c.data.sample_rate);
            s.get("clip_seconds", c.data.clip_seconds);
            s.get("n_clips", c.data.n_clips);
            s.get("n_mels", c.data.n_mels);
            s.get("image_size", c.data.image_size);
        } else if (key == "mixer") {
            Section s(value, "mixer");
            std::string kind = mixer::to_string(c.mixer.kind);
            s.get("kind", kind);
            try {
                c.mixer.kind = mixer::mixer_kind_from_string(kind);
            } catch (const Error& e) {
                throw ConfigError("mixer.kind", e.what());
            }
            s.get("s", c.mixer.s);
            s.get("p", c.mixer.p);
            s.get("alpha", c.mixer.alpha);
        } else if (key == "train") {
            Section s(value, "train");
            lr_given = s.has("lr");
            s.get("lr", c.train.lr);
            s.get("weight_decay", c.train.weight_decay);
            read_betas(s, c.train.beta1, c.train.beta2);
            s.get("epochs", c.train.epochs);
            s.get("warmup_epochs", c.train.warmup_epochs);
            s.get("min_lr", c.train.min_lr);
            s.get("batch_size", c.train.batch_size);
            s.get("mask_ratio", c.train.mask_ratio);
            s.get("seed", c.train.seed);
            s.get("augment", c.train.augment);
            s.get("loss_on_all", c.train.loss_on_all);
            s.get("norm_pix_loss", c.train.norm_pix_loss);
            s.get("keep_masked_fraction", c.train.keep_masked_fraction);
        } else if (key == "retrieval") {
            Section s(value, "retrieval");
            s.get("tau", c.retrieval.tau);
            s.get("symmetric", c.retrieval.symmetric);
            s.get("exclude_same_item_negatives", c.retrieval.exclude_same_item_negatives);
            s.get("lr", c.retrieval.lr);
            s.get("min_lr", c.retrieval.min_lr);
            s.get("epochs", c.retrieval.epochs);
            s.get("warmup_epochs", c.retrieval.warmup_epochs);
            s.get("batch_size", c.retrieval.batch_size);
            s.get("weight_decay", c.retrieval.weight_decay);
            read_betas(s, c.retrieval.beta1, c.retrieval.beta2);
            s.get("augment", c.retrieval.augment);
        } else {
            throw ConfigError(key, "unknown key");
        }
    }
    if (!data_clips_given) c.data.n_clips = c.model.n_clips;
    if (!data_size_given) c.data.image_size = c.model.image_size;
    if (!lr_given && c.preset == "vit_base") c.train.lr = pretrain::default_lr(c.model.dec_kind);
    c.validate();
    return c;
}

RunConfig load(const std::filesystem::path& path) { return parse(bytes::read_file(path)); }

std::string to_json(const RunConfig& c) {
    json doc;
    doc["preset"] = c.preset;
    doc["model"] = {{"enc_depth", c.model.enc_depth},     {"enc_dim", c.model.enc_dim},
                    {"heads", c.model.heads},             {"mlp_ratio", c.model.mlp_ratio},
                    {"patch", c.model.patch},             {"image_size", c.model.image_size},
                    {"n_clips", c.model.n_clips},         {"dec_kind", model::to_string(c.model.dec_kind)},
                    {"dec_depth", c.model.dec_depth},     {"dec_dim", c.model.dec_dim},
                    {"dec_heads", c.model.dec_heads},     {"solo_split_head", c.model.solo_split_head}};
    doc["data"] = {{"sample_rate", c.data.sample_rate},
                   {"clip_seconds", c.data.clip_seconds},
                   {"n_clips", c.data.n_clips},
                   {"n_mels", c.data.n_mels},
                   {"image_size", c.data.image_size}};
    doc["mixer"] = {{"kind", mixer::to_string(c.mixer.kind)}, {"s", c.mixer.s}, {"p", c.mixer.p}, {"alpha", c.mixer.alpha}};
    doc["train"] = {{"lr", c.train.lr},
                    {"weight_decay", c.train.weight_decay},
                    {"betas", {c.train.beta1, c.train.beta2}},
                    {"epochs", c.train.epochs},
                    {"warmup_epochs", c.train.warmup_epochs},
                    {"min_lr", c.train.min_lr},
                    {"batch_size", c.train.batch_size},
                    {"mask_ratio", c.train.mask_ratio},
                    {"seed", c.train.seed},
                    {"augment", c.train.augment},
                    {"loss_on_all", c.train.loss_on_all},
                    {"norm_pix_loss", c.train.norm_pix_loss},
                    {"keep_masked_fraction", c.train.keep_masked_fraction}};
    doc["retrieval"] = {{"tau", c.retrieval.tau},
                        {"symmetric", c.retrieval.symmetric},
                        {"exclude_same_item_negatives", c.retrieval.exclude_same_item_negatives},
                        {"lr", c.retrieval.lr},
                        {"min_lr", c.retrieval.min_lr},
                        {"epochs", c.retrieval.epochs},
                        {"warmup_epochs", c.retrieval.warmup_epochs},
                        {"batch_size", c.retrieval.batch_size},
                        {"weight_decay", c.retrieval.weight_decay},
                        {"betas", {c.retrieval.beta1, c.retrieval.beta2}},
                        {"augment", c.retrieval.augment}};
    return doc.dump(2) + "\n";
}

}  // namespace cmmix::config
