// coverid: cover-song identification toolkit.
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <cstdio>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "coverid/cqt.hpp"
#include "coverid/gradsuite.hpp"
#include "coverid/retrieval.hpp"
#include "coverid/synth.hpp"
#include "coverid/training.hpp"

namespace fs = std::filesystem;
using namespace coverid;

namespace {

int cmd_synth(int n_cliques, int versions, uint64_t seed, const std::string& out,
              bool wav, int factor, bool log_compress) {
    BuildDatasetOptions opt;
    opt.n_cliques = n_cliques;
    opt.versions_per_clique = versions;
    opt.seed = seed;
    opt.out_dir = out;
    opt.write_wav = wav;
    opt.downsample_factor = factor;
    opt.log_compress = log_compress;
    DatasetManifest m = build_dataset(opt);
    std::cout << "wrote " << m.entries.size() << " recordings to " << out << "\n";
    return 0;
}

int cmd_extract(const std::vector<std::string>& inputs, const std::string& out,
                int factor, bool log_compress) {
    fs::create_directories(out);
    for (const auto& path : inputs) {
        AudioClip clip = load_wav(path);
        if (clip.sample_rate != kCqtSampleRate)
            clip = resample(clip, kCqtSampleRate);
        CqtSpectrogram cqt = compute_cqt(clip);
        cqt = downsample_time(cqt, factor);
        cqt = normalize(cqt, log_compress);
        const std::string dst =
            (fs::path(out) / (fs::path(path).stem().string() + ".cqt")).string();
        write_cqt(dst, cqt);
        std::cout << dst << ": " << cqt.n_frames << " frames\n";
    }
    return 0;
}

int cmd_train(const std::string& manifest_path, const std::string& preset,
              size_t epochs, uint64_t seed, const std::string& out,
              const std::string& loss, bool gem_split, size_t embed_dim) {
    LabeledDataset ds = label_dataset(read_manifest(manifest_path));
    ModelConfig cfg = (preset == "mini") ? ModelConfig::mini(ds.num_classes())
                                         : ModelConfig::full(ds.num_classes());
    cfg.gem_split = gem_split;
    cfg.embed_dim = embed_dim;

    TrainConfig tc;
    tc.epochs = epochs;
    tc.seed = seed;
    tc.loss_mode = loss_mode_from_name(loss);
    if (preset == "full") tc.crop_len = 400;
    if (tc.loss_mode == LossMode::kClsOnly || tc.loss_mode == LossMode::kJointNaive) {
        require(embed_dim == 0,
                "train: --embed-dim requires --loss tri or bnneck (classifier reads f_t)");
    }

    ResNetIbnModel<float> model(cfg, seed);
    TrainResult res = train(model, ds, tc, out);
    std::cout << "best val mAP " << res.best_val_map << " at epoch " << res.best_epoch
              << "; checkpoint in " << out << "\n";
    return 0;
}

int cmd_embed(const std::string& ckpt_dir, const std::string& manifest_path,
              const std::string& split, const std::string& out) {
    Checkpoint ckpt = load_checkpoint(ckpt_dir);
    LabeledDataset ds = label_dataset(read_manifest(manifest_path));
    FeatureCache cache(ds);
    auto idx = ds.split_indices(split);
    require(!idx.empty(), "embed: no entries in split '" + split + "'");
    EmbeddingStore store = embed_entries(*ckpt.model, ds, idx, cache,
                                         ckpt.model_cfg.embed_dim > 0);
    write_embeddings(out, store);
    std::cout << "wrote " << store.records.size() << " embeddings (dim " << store.dim
              << ") to " << out << "\n";
    return 0;
}

int cmd_evaluate(const std::string& emb_path, const std::string& manifest_path,
                 bool exclude_self, bool json_out) {
    EmbeddingStore store = read_embeddings(emb_path);
    DatasetManifest manifest = read_manifest(manifest_path);
    EvalReport rep = evaluate(store, store, manifest.clique_labels(), exclude_self);
    std::cout << (json_out ? rep.to_json() : rep.to_table()) << "\n";
    return 0;
}

int cmd_query(const std::string& emb_path, const std::string& ckpt_dir,
              const std::string& wav_path, size_t topk, int transpose_search,
              bool json_out) {
    Checkpoint ckpt = load_checkpoint(ckpt_dir);
    EmbeddingStore refs = read_embeddings(emb_path);
    AudioClip clip = load_wav(wav_path);
    if (clip.sample_rate != kCqtSampleRate) clip = resample(clip, kCqtSampleRate);
    CqtSpectrogram cqt = compute_cqt(clip);
    cqt = downsample_time(cqt, 20);
    cqt = normalize(cqt, false);

    const bool use_proj = ckpt.model_cfg.embed_dim > 0;
    struct Hit {
        std::string id;
        double score;
    };
    std::vector<Hit> hits;
    if (transpose_search > 0) {
        // max over vertical shifts of the *query* spectrogram; references
        // exist only as stored embeddings
        std::vector<std::vector<float>> shifted;
        for (int i = -transpose_search; i <= transpose_search; ++i)
            shifted.push_back(
                extract_embedding(*ckpt.model, shift_cqt_bins(cqt, i), use_proj));
        for (const auto& r : refs.records) {
            double best = -2;
            for (const auto& q : shifted)
                best = std::max(best, cosine_similarity(q, r.vec));
            hits.push_back({r.id, best});
        }
    } else {
        std::vector<float> q = extract_embedding(*ckpt.model, cqt, use_proj);
        for (const auto& r : refs.records)
            hits.push_back({r.id, cosine_similarity(q, r.vec)});
    }
    std::stable_sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.id < b.id;
    });
    if (hits.size() > topk) hits.resize(topk);

    if (json_out) {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& h : hits) j.push_back({{"id", h.id}, {"score", h.score}});
        std::cout << j.dump(2) << "\n";
    } else {
        for (size_t i = 0; i < hits.size(); ++i)
            std::printf("%3zu  %-24s %.6f\n", i + 1, hits[i].id.c_str(), hits[i].score);
    }
    return 0;
}

int cmd_gradcheck(uint64_t seed, bool self_test_broken) {
    auto reports = run_gradient_suite(seed, self_test_broken);
    bool all_pass = true;
    for (const auto& r : reports) {
        const bool ok = r.pass();
        all_pass = all_pass && ok;
        std::printf("%-24s %-5s max_rel_err %.3e  (%zu coords)\n", r.name.c_str(),
                    ok ? "PASS" : "FAIL", r.max_rel_err, r.coords_checked);
    }
    return all_pass ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cover-song identification toolkit"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "render a synthetic cover-song corpus");
    int s_cliques = 30, s_versions = 5, s_factor = 20;
    uint64_t s_seed = 42;
    std::string s_out;
    bool s_wav = false, s_log = false;
    synth->add_option("--cliques", s_cliques, "number of cliques");
    synth->add_option("--versions", s_versions, "versions per clique");
    synth->add_option("--seed", s_seed, "rng seed");
    synth->add_option("--out", s_out, "output directory")->required();
    synth->add_flag("--wav", s_wav, "also write wav files");
    synth->add_option("--factor", s_factor, "time downsample factor");
    synth->add_flag("--log", s_log, "log-compress features");

    // extract
    auto* extract = app.add_subcommand("extract", "extract .cqt features from wav files");
    std::vector<std::string> e_in;
    std::string e_out;
    int e_factor = 100;
    bool e_log = false;
    uint64_t e_seed = 42;
    extract->add_option("--in", e_in, "input wav files")->required()->expected(-1);
    extract->add_option("--out", e_out, "output directory")->required();
    extract->add_option("--factor", e_factor, "time downsample factor");
    extract->add_flag("--log", e_log, "log-compress features");
    extract->add_option("--seed", e_seed, "rng seed (unused; accepted for uniformity)");

    // train
    auto* train_cmd = app.add_subcommand("train", "train a model on a manifest");
    std::string t_manifest, t_preset = "mini", t_out, t_loss = "bnneck";
    size_t t_epochs = 40, t_embed_dim = 0;
    uint64_t t_seed = 42;
    bool t_gem_split = false;
    train_cmd->add_option("--manifest", t_manifest, "dataset manifest (jsonl)")->required();
    train_cmd->add_option("--preset", t_preset, "model preset")
        ->check(CLI::IsMember({"mini", "full"}));
    train_cmd->add_option("--epochs", t_epochs, "training epochs");
    train_cmd->add_option("--seed", t_seed, "rng seed");
    train_cmd->add_option("--out", t_out, "checkpoint directory")->required();
    train_cmd->add_option("--loss", t_loss, "loss mode")
        ->check(CLI::IsMember({"cls", "tri", "naive", "bnneck"}));
    train_cmd->add_flag("--gem-split", t_gem_split, "split time/frequency GeM pooling");
    train_cmd->add_option("--embed-dim", t_embed_dim, "projection head dimension (0 = off)");

    // embed
    auto* embed = app.add_subcommand("embed", "embed a manifest split with a checkpoint");
    std::string m_ckpt, m_manifest, m_split = "test", m_out;
    uint64_t m_seed = 42;
    embed->add_option("--ckpt", m_ckpt, "checkpoint directory")->required();
    embed->add_option("--manifest", m_manifest, "dataset manifest")->required();
    embed->add_option("--split", m_split, "split name")
        ->check(CLI::IsMember({"train", "val", "test"}));
    embed->add_option("--out", m_out, "output embedding file")->required();
    embed->add_option("--seed", m_seed, "rng seed (unused; accepted for uniformity)");

    // evaluate
    auto* eval_cmd = app.add_subcommand("evaluate", "score an embedding store");
    std::string v_emb, v_manifest;
    bool v_exclude_self = false, v_json = false;
    uint64_t v_seed = 42;
    eval_cmd->add_option("--emb", v_emb, "embedding file")->required();
    eval_cmd->add_option("--manifest", v_manifest, "dataset manifest")->required();
    eval_cmd->add_flag("--exclude-self", v_exclude_self, "drop the query itself from rankings");
    eval_cmd->add_flag("--json", v_json, "machine-readable output");
    eval_cmd->add_option("--seed", v_seed, "rng seed (unused; accepted for uniformity)");

    // query
    auto* query = app.add_subcommand("query", "rank references against a query wav");
    std::string q_emb, q_ckpt, q_wav;
    size_t q_topk = 10;
    int q_transpose = 0;
    bool q_json = false;
    uint64_t q_seed = 42;
    query->add_option("--emb", q_emb, "reference embedding file")->required();
    query->add_option("--ckpt", q_ckpt, "checkpoint directory")->required();
    query->add_option("--wav", q_wav, "query wav file")->required();
    query->add_option("--topk", q_topk, "results to print");
    query->add_option("--transpose-search", q_transpose,
                      "max vertical bin shift for transposition-invariant search");
    query->add_flag("--json", q_json, "machine-readable output");
    query->add_option("--seed", q_seed, "rng seed (unused; accepted for uniformity)");

    // gradcheck
    auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    uint64_t g_seed = 42;
    bool g_broken = false;
    grad->add_option("--seed", g_seed, "rng seed");
    grad->add_flag("--self-test-broken", g_broken,
                   "inject a known-bad gradient fixture (must fail)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // prints help; exit 0
    } catch (const CLI::ParseError& e) {
        app.exit(e);  // prints the usage message
        return 1;
    }

    try {
        if (*synth) return cmd_synth(s_cliques, s_versions, s_seed, s_out, s_wav, s_factor, s_log);
        if (*extract) return cmd_extract(e_in, e_out, e_factor, e_log);
        if (*train_cmd)
            return cmd_train(t_manifest, t_preset, t_epochs, t_seed, t_out, t_loss,
                             t_gem_split, t_embed_dim);
        if (*embed) return cmd_embed(m_ckpt, m_manifest, m_split, m_out);
        if (*eval_cmd) return cmd_evaluate(v_emb, v_manifest, v_exclude_self, v_json);
        if (*query) return cmd_query(q_emb, q_ckpt, q_wav, q_topk, q_transpose, q_json);
        if (*grad) return cmd_gradcheck(g_seed, g_broken);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
