// SPDX-License-Identifier: Apache-2.0
//
// cmmix: data generation, pre-training, fine-tuning, evaluation, embedding
// export, flexible queries, reconstruction dumps and model accounting.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"

#include "cmmix/bytes.hpp"
#include "cmmix/checkpoint.hpp"
#include "cmmix/config.hpp"
#include "cmmix/formats.hpp"
#include "cmmix/pretrain.hpp"
#include "cmmix/retrieval.hpp"

namespace fs = std::filesystem;
using namespace cmmix;

namespace {

struct Common {
    std::string config_path;
    std::string preset;
    std::optional<std::uint64_t> seed;
    std::string data;
    std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool needs_data, bool needs_out) {
    cmd->add_option("--config", c.config_path, "JSON run configuration");
    cmd->add_option("--preset", c.preset, "vit_base or toy (used when --config is absent)");
    cmd->add_option("--seed", c.seed, "overrides train.seed");
    if (needs_data) cmd->add_option("--data", c.data, "directory of .cmmd records")->required();
    if (needs_out) cmd->add_option("--out", c.out, "output location")->required();
}

config::RunConfig resolve(const Common& c) {
    config::RunConfig cfg;
    if (!c.config_path.empty()) {
        if (!fs::exists(c.config_path)) throw IoError("config file '" + c.config_path + "' does not exist");
        cfg = config::load(c.config_path);
    } else {
        cfg = config::preset(c.preset.empty() ? "vit_base" : c.preset);
        if (c.preset.empty() || c.preset == "vit_base") cfg.train.lr = pretrain::default_lr(cfg.model.dec_kind);
    }
    if (c.seed) cfg.train.seed = *c.seed;
    cfg.validate();
    return cfg;
}

void write_resolved(const config::RunConfig& cfg, const fs::path& dir) {
    bytes::write_file(dir / "resolved_config.json", config::to_json(cfg));
}

std::ofstream open_csv(const fs::path& path) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << std::setprecision(9);
    return out;
}

checkpoint::ArrayRecord scalar_record(const std::string& name, float value) { return {name, {1}, {value}}; }

std::size_t read_step(const checkpoint::Checkpoint& ckpt, const std::string& name) {
    const auto* rec = ckpt.find(name);
    return rec && !rec->data.empty() ? static_cast<std::size_t>(rec->data[0]) : 0;
}

model::Model<float> load_model(const fs::path& path, const config::RunConfig& cfg) {
    const auto ckpt = checkpoint::load(path);
    model::Model<float> m(cfg.model, 0);
    auto params = m.params();
    checkpoint::restore_params(params, ckpt);
    return m;
}

/// A fine-tuned checkpoint holds "video.*"/"audio.*"; a pre-trained one holds
/// "encoder.*", which seeds both streams.
retrieval::TwoStream<float> load_streams(const fs::path& path, const config::RunConfig& cfg) {
    const auto ckpt = checkpoint::load(path);
    Rng rng(0);
    auto enc = model::make_encoder<float>(cfg.model, rng);
    auto streams = retrieval::TwoStream<float>::from_encoder(enc, cfg.model.patch);
    if (ckpt.find("video.patch_embed.weight")) {
        auto params = streams.params();
        checkpoint::restore_params(params, ckpt);
    } else {
        optim::ParamList<float> p;
        enc.collect(p, "encoder");
        checkpoint::restore_params(p, ckpt);
        streams = retrieval::TwoStream<float>::from_encoder(enc, cfg.model.patch);
    }
    return streams;
}

int cmd_gen_data(const Common& c, std::size_t count) {
    const auto cfg = resolve(c);
    const fs::path out(c.out);
    Rng rng = make_rng(cfg.train.seed, 0x6e6);
    for (std::size_t i = 0; i < count; ++i) {
        auto spec = signal::draw_synthetic_spec(rng);
        char name[32];
        std::snprintf(name, sizeof name, "video_%05zu.cmmd", i);
        formats::write_cmmd(out / name, formats::make_record(signal::synth_pair(spec, cfg.data)));
    }
    write_resolved(cfg, out);
    std::cout << "wrote " << count << " records to " << out.string() << "\n";
    return 0;
}

int cmd_pretrain(const Common& c, std::size_t max_steps) {
    const auto cfg = resolve(c);
    const fs::path out(c.out);
    const auto samples = pretrain::load_samples(c.data, cfg.data);
    model::Model<float> m(cfg.model, derive_seed(cfg.train.seed, 0x30de1));
    pretrain::Pretrainer trainer(m, samples, cfg.mixer, cfg.train);
    trainer.diagnostic_dir = out;
    write_resolved(cfg, out);
    auto csv = open_csv(out / "metrics.csv");
    pretrain::write_metrics_header(csv);
    bool warned = false;
    trainer.run(
        [&](const pretrain::StepMetrics& s) {
            pretrain::write_metrics_row(csv, s);
            if (s.used_all_positions && !warned) {
                std::cerr << "warning: nothing is masked; the loss covers every position\n";
                warned = true;
            }
        },
        max_steps);
    checkpoint::Checkpoint ckpt;
    ckpt.config_json = config::to_json(cfg);
    checkpoint::append_params(ckpt.records, trainer.params());
    checkpoint::append_adam(ckpt.records, trainer.params(), trainer.optimizer());
    ckpt.records.push_back(scalar_record("adam.step", static_cast<float>(trainer.optimizer().step_count())));
    checkpoint::save(out / "pretrain.cmmx", ckpt);
    std::cout << "pre-trained " << trainer.steps_done() << " steps; checkpoint " << (out / "pretrain.cmmx").string()
              << "\n";
    return 0;
}

int cmd_finetune(const Common& c, const std::string& ckpt_path, std::size_t max_steps) {
    const auto cfg = resolve(c);
    const fs::path out(c.out);
    const auto samples = pretrain::load_samples(c.data, cfg.data);
    retrieval::TwoStream<float> streams;
    if (ckpt_path.empty()) {
        Rng rng(derive_seed(cfg.train.seed, 0x30de1));
        streams = retrieval::TwoStream<float>::from_encoder(model::make_encoder<float>(cfg.model, rng), cfg.model.patch);
    } else {
        if (!fs::exists(ckpt_path)) throw IoError("checkpoint '" + ckpt_path + "' does not exist");
        streams = load_streams(ckpt_path, cfg);
    }
    retrieval::Finetuner tuner(streams, samples, cfg.retrieval, cfg.train.seed);
    write_resolved(cfg, out);
    auto csv = open_csv(out / "finetune_metrics.csv");
    retrieval::write_finetune_header(csv);
    tuner.run([&](const retrieval::FinetuneMetrics& s) { retrieval::write_finetune_row(csv, s); }, max_steps);
    checkpoint::Checkpoint ckpt;
    ckpt.config_json = config::to_json(cfg);
    checkpoint::append_params(ckpt.records, tuner.params());
    checkpoint::append_adam(ckpt.records, tuner.params(), tuner.optimizer());
    ckpt.records.push_back(scalar_record("adam.step", static_cast<float>(tuner.optimizer().step_count())));
    checkpoint::save(out / "finetune.cmmx", ckpt);
    std::cout << "fine-tuned " << tuner.steps_done() << " steps; checkpoint " << (out / "finetune.cmmx").string()
              << "\n";
    return 0;
}

int cmd_eval(const Common& c, const std::string& ckpt_path) {
    const auto cfg = resolve(c);
    if (!fs::exists(ckpt_path)) throw IoError("checkpoint '" + ckpt_path + "' does not exist");
    const fs::path out(c.out);
    const auto samples = pretrain::load_samples(c.data, cfg.data);
    const auto streams = load_streams(ckpt_path, cfg);
    const auto pv = retrieval::embed_samples(streams.video, samples, retrieval::Modality::Video, cfg.model.patch);
    const auto pm = retrieval::embed_samples(streams.audio, samples, retrieval::Modality::Audio, cfg.model.patch);
    const auto v2m = retrieval::evaluate(pv, pm, retrieval::Direction::VideoToMusic);
    const auto m2v = retrieval::evaluate(pm, pv, retrieval::Direction::MusicToVideo);
    write_resolved(cfg, out);
    auto csv = open_csv(out / "report.csv");
    retrieval::write_report_header(csv);
    retrieval::write_report_row(csv, v2m);
    retrieval::write_report_row(csv, m2v);
    retrieval::write_report_header(std::cout);
    retrieval::write_report_row(std::cout, v2m);
    retrieval::write_report_row(std::cout, m2v);
    return 0;
}

int cmd_embed(const Common& c, const std::string& ckpt_path, const std::string& stream) {
    const auto cfg = resolve(c);
    if (!fs::exists(ckpt_path)) throw IoError("checkpoint '" + ckpt_path + "' does not exist");
    if (stream != "video" && stream != "audio") throw ConfigError("--stream", "expected video or audio");
    const auto samples = pretrain::load_samples(c.data, cfg.data);
    const auto streams = load_streams(ckpt_path, cfg);
    const auto m = stream == "video" ? retrieval::Modality::Video : retrieval::Modality::Audio;
    const auto table = retrieval::embed_samples(streams.stream(m), samples, m, cfg.model.patch);
    const fs::path out(c.out);
    formats::write_cmme(out, table);
    write_resolved(cfg, out.has_parent_path() ? out.parent_path() : fs::path("."));
    std::cout << "wrote " << table.count << " x " << table.segments << " x " << table.dim << " embeddings to "
              << out.string() << "\n";
    return 0;
}

std::vector<float> item_rows(const formats::EmbeddingTable& t, std::size_t index) {
    if (index >= t.count) throw InputError("index " + std::to_string(index) + " is outside a table of " +
                                           std::to_string(t.count));
    const std::size_t row = static_cast<std::size_t>(t.segments) * t.dim;
    return {t.data.begin() + static_cast<std::ptrdiff_t>(index * row),
            t.data.begin() + static_cast<std::ptrdiff_t>((index + 1) * row)};
}

int cmd_query(const std::string& pool_path, const std::string& query_path, std::size_t index,
              const std::string& modifier_path, std::size_t modifier_index, const std::string& op, std::size_t top) {
    for (const auto& p : {pool_path, query_path})
        if (!fs::exists(p)) throw IoError("embedding file '" + p + "' does not exist");
    const auto pool = formats::read_cmme(pool_path);
    const auto queries = formats::read_cmme(query_path);
    if (queries.dim != pool.dim) throw InputError("query and pool embedding widths differ");
    auto q = item_rows(queries, index);
    std::size_t segments = queries.segments;
    if (!modifier_path.empty()) {
        if (!fs::exists(modifier_path)) throw IoError("embedding file '" + modifier_path + "' does not exist");
        const auto mods = formats::read_cmme(modifier_path);
        if (mods.dim != pool.dim) throw InputError("modifier and pool embedding widths differ");
        q = retrieval::flexible_query(q, segments, item_rows(mods, modifier_index), mods.segments, pool.dim,
                                      retrieval::query_op_from_string(op));
        segments = std::max<std::size_t>(segments, mods.segments);
    }
    const auto scores = retrieval::track_scores(q, segments, pool);
    const auto order = retrieval::rank_candidates(q, segments, pool);
    std::cout << "rank,candidate,score\n" << std::setprecision(6);
    for (std::size_t r = 0; r < std::min(top, order.size()); ++r)
        std::cout << r + 1 << ',' << order[r] << ',' << scores[order[r]] << '\n';
    return 0;
}

int cmd_reconstruct(const Common& c, const std::string& ckpt_path, std::size_t index, double ratio) {
    const auto cfg = resolve(c);
    if (!fs::exists(ckpt_path)) throw IoError("checkpoint '" + ckpt_path + "' does not exist");
    const auto samples = pretrain::load_samples(c.data, cfg.data);
    if (index >= samples.size()) throw InputError("--index is outside the data set");
    const auto m = load_model(ckpt_path, cfg);
    const auto dump = pretrain::reconstruct(m, samples[index], cfg.mixer, ratio, cfg.train.seed);
    const fs::path out(c.out);
    pretrain::write_reconstruction(dump, out);
    write_resolved(cfg, out);
    std::cout << "wrote " << (out / "video.ppm").string() << " and " << (out / "audio.ppm").string() << "\n";
    return 0;
}

int cmd_info(const Common& c) {
    const auto cfg = resolve(c);
    const auto p = model::count_params(cfg.model);
    const auto f = model::estimate_flops(cfg.model, cfg.train.mask_ratio);
    std::cout << "decoder: " << model::to_string(cfg.model.dec_kind) << "\n"
              << "tokens: " << cfg.model.geometry().n_tokens() << " (" << cfg.model.n_clips << " clips)\n"
              << "encoder_params: " << p.encoder << "\n"
              << "decoder_params: " << p.decoder << "\n"
              << "total_params: " << p.total() << "\n"
              << std::setprecision(4) << "encoder_gflops: " << f.encoder / 1e9 << "\n"
              << "decoder_gflops: " << f.decoder / 1e9 << "\n"
              << "total_gflops: " << f.total() / 1e9 << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cmmix: cross-modal mixing pre-training and retrieval"};
    app.require_subcommand(1);

    Common common;
    std::size_t count = 32;
    std::size_t max_steps = 0;
    std::string ckpt;
    std::string stream = "video";
    std::string pool, query, modifier, op = "sub";
    std::size_t index = 0, modifier_index = 0, top = 10;
    double ratio = 0.5;

    auto* gen = app.add_subcommand("gen-data", "write synthetic .cmmd records");
    add_common(gen, common, false, true);
    gen->add_option("--count", count, "number of videos");

    auto* pre = app.add_subcommand("pretrain", "fuse-then-separate pre-training");
    add_common(pre, common, true, true);
    pre->add_option("--max-steps", max_steps, "stop after this many steps (0 = full schedule)");

    auto* fine = app.add_subcommand("finetune", "two-stream contrastive fine-tuning");
    add_common(fine, common, true, true);
    fine->add_option("--checkpoint", ckpt, "pre-trained checkpoint (omit for random initialization)");
    fine->add_option("--max-steps", max_steps, "stop after this many steps (0 = full schedule)");

    auto* ev = app.add_subcommand("eval", "retrieval report over a data set");
    add_common(ev, common, true, true);
    ev->add_option("--checkpoint", ckpt, "fine-tuned or pre-trained checkpoint")->required();

    auto* emb = app.add_subcommand("embed", "export segment embeddings (.cmme)");
    add_common(emb, common, true, true);
    emb->add_option("--checkpoint", ckpt, "fine-tuned or pre-trained checkpoint")->required();
    emb->add_option("--stream", stream, "video or audio");

    auto* qry = app.add_subcommand("query", "rank a pool for one (optionally modified) query");
    qry->add_option("--pool", pool, "candidate embeddings (.cmme)")->required();
    qry->add_option("--query", query, "query embeddings (.cmme)")->required();
    qry->add_option("--index", index, "query item");
    qry->add_option("--modifier", modifier, "embeddings holding the modifier item");
    qry->add_option("--modifier-index", modifier_index, "modifier item");
    qry->add_option("--op", op, "add or sub");
    qry->add_option("--top", top, "how many candidates to print");

    auto* rec = app.add_subcommand("reconstruct", "write reconstruction triptychs (.ppm)");
    add_common(rec, common, true, true);
    rec->add_option("--checkpoint", ckpt, "pre-trained checkpoint")->required();
    rec->add_option("--index", index, "sample to reconstruct");
    rec->add_option("--mask-ratio", ratio, "fraction of tokens hidden");

    auto* info = app.add_subcommand("info", "parameter and FLOP counts");
    add_common(info, common, false, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (gen->parsed()) return cmd_gen_data(common, count);
        if (pre->parsed()) return cmd_pretrain(common, max_steps);
        if (fine->parsed()) return cmd_finetune(common, ckpt, max_steps);
        if (ev->parsed()) return cmd_eval(common, ckpt);
        if (emb->parsed()) return cmd_embed(common, ckpt, stream);
        if (qry->parsed()) return cmd_query(pool, query, index, modifier, modifier_index, op, top);
        if (rec->parsed()) return cmd_reconstruct(common, ckpt, index, ratio);
        if (info->parsed()) return cmd_info(common);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 3;
    } catch (const NonFiniteError& e) {
        std::cerr << "training diverged: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
