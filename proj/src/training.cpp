#include "coverid/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

namespace coverid {

namespace fs = std::filesystem;
using nlohmann::json;

std::string loss_mode_name(LossMode m) {
    switch (m) {
        case LossMode::kClsOnly: return "cls";
        case LossMode::kTriOnly: return "tri";
        case LossMode::kJointNaive: return "naive";
        case LossMode::kJointBnneck: return "bnneck";
    }
    return "bnneck";
}

LossMode loss_mode_from_name(const std::string& s) {
    if (s == "cls") return LossMode::kClsOnly;
    if (s == "tri") return LossMode::kTriOnly;
    if (s == "naive") return LossMode::kJointNaive;
    if (s == "bnneck") return LossMode::kJointBnneck;
    throw std::runtime_error("unknown loss mode: " + s);
}

const CqtSpectrogram& FeatureCache::get(size_t idx) {
    require(idx < cache_.size(), "FeatureCache: index out of range");
    if (!cache_[idx])
        cache_[idx] = std::make_unique<CqtSpectrogram>(read_cqt(ds_.entries[idx].feature));
    return *cache_[idx];
}

std::vector<size_t> pk_sample(const LabeledDataset& ds, size_t P, size_t K_per_class,
                              Rng& rng) {
    // cliques present in the training split, by dense label
    std::vector<std::vector<size_t>> by_clique(ds.num_classes());
    for (size_t i = 0; i < ds.entries.size(); ++i)
        if (ds.entries[i].split == "train")
            by_clique[static_cast<size_t>(ds.entries[i].clique_index)].push_back(i);
    std::vector<size_t> cliques;
    for (size_t c = 0; c < by_clique.size(); ++c)
        if (!by_clique[c].empty()) cliques.push_back(c);
    require(cliques.size() >= P, "pk_sample: fewer than P cliques in the training split");

    // partial Fisher-Yates: P distinct cliques, uniform without replacement
    for (size_t i = 0; i < P; ++i) {
        size_t j = static_cast<size_t>(
            rng.uniform_int(static_cast<int64_t>(i), static_cast<int64_t>(cliques.size()) - 1));
        std::swap(cliques[i], cliques[j]);
    }

    std::vector<size_t> batch;
    for (size_t i = 0; i < P; ++i) {
        auto& members = by_clique[cliques[i]];
        if (members.size() >= K_per_class) {
            std::vector<size_t> pool = members;
            for (size_t k = 0; k < K_per_class; ++k) {
                size_t j = static_cast<size_t>(rng.uniform_int(
                    static_cast<int64_t>(k), static_cast<int64_t>(pool.size()) - 1));
                std::swap(pool[k], pool[j]);
                batch.push_back(pool[k]);
            }
        } else {
            for (size_t k = 0; k < K_per_class; ++k)
                batch.push_back(members[static_cast<size_t>(
                    rng.uniform_int(0, static_cast<int64_t>(members.size()) - 1))]);
        }
    }
    return batch;
}

CqtSpectrogram crop_or_pad(const CqtSpectrogram& cqt, size_t crop_len, Rng& rng,
                           bool train_mode) {
    if (!train_mode) return cqt;
    CqtSpectrogram out;
    out.n_frames = crop_len;
    out.values.assign(static_cast<size_t>(kCqtBins) * crop_len, 0.0f);
    out.fmin = cqt.fmin;
    out.hop_length = cqt.hop_length;
    out.downsample_factor = cqt.downsample_factor;
    const size_t T = cqt.n_frames;
    size_t start = 0;
    if (T > crop_len)
        start = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(T - crop_len)));
    const size_t span = std::min(T, crop_len);
    for (size_t b = 0; b < kCqtBins; ++b)
        for (size_t t = 0; t < span; ++t) out.at(b, t) = cqt.at(b, start + t);
    return out;
}

void adam_step(std::vector<Parameter<float>*>& params, double lr, double beta1,
               double beta2, double eps) {
    for (auto* p : params) {
        p->step_count += 1;
        const double t = static_cast<double>(p->step_count);
        const double bc1 = 1.0 - std::pow(beta1, t);
        const double bc2 = 1.0 - std::pow(beta2, t);
        for (size_t i = 0; i < p->value().size(); ++i) {
            const double g = p->grad()[i];
            double m = beta1 * p->adam_m[i] + (1.0 - beta1) * g;
            double v = beta2 * p->adam_v[i] + (1.0 - beta2) * g * g;
            p->adam_m[i] = static_cast<float>(m);
            p->adam_v[i] = static_cast<float>(v);
            const double update = lr * (m / bc1) / (std::sqrt(v / bc2) + eps);
            p->value()[i] = static_cast<float>(p->value()[i] - update);
        }
    }
}

EmbeddingStore embed_entries(ResNetIbnModel<float>& model, const LabeledDataset& ds,
                             const std::vector<size_t>& indices, FeatureCache& cache,
                             bool use_projection) {
    EmbeddingStore store;
    for (size_t idx : indices)
        store.add(ds.entries[idx].id, extract_embedding(model, cache.get(idx), use_projection));
    return store;
}

namespace {

struct StepLosses {
    double ce = 0, tri = 0, total = 0;
};

StepLosses train_step(ResNetIbnModel<float>& model, const LabeledDataset& ds,
                      FeatureCache& cache, const std::vector<size_t>& batch_idx,
                      const TrainConfig& cfg, Rng& rng) {
    const size_t B = batch_idx.size();
    Tensor<float> input({B, 1, static_cast<size_t>(kCqtBins), cfg.crop_len});
    std::vector<int> labels(B);
    for (size_t i = 0; i < B; ++i) {
        const auto& entry = ds.entries[batch_idx[i]];
        labels[i] = entry.clique_index;
        // tempo augmentation: nearest-neighbor time resampling, matching
        // the tempo-ratio spread between covers
        const CqtSpectrogram& full = cache.get(batch_idx[i]);
        const double ratio = rng.uniform(0.75, 1.33);
        CqtSpectrogram stretched;
        stretched.n_frames = std::max<size_t>(
            1, static_cast<size_t>(std::llround(full.n_frames / ratio)));
        stretched.values.resize(static_cast<size_t>(kCqtBins) * stretched.n_frames);
        stretched.downsample_factor = full.downsample_factor;
        for (size_t t = 0; t < stretched.n_frames; ++t) {
            const size_t src = std::min<size_t>(full.n_frames - 1,
                                                static_cast<size_t>(t * ratio));
            for (size_t b = 0; b < kCqtBins; ++b)
                stretched.at(b, t) = full.at(b, src);
        }
        CqtSpectrogram crop = crop_or_pad(stretched, cfg.crop_len, rng, true);
        // transposition augmentation: covers of a clique differ by key,
        // so train the class to be invariant to vertical bin shifts
        const int shift = static_cast<int>(rng.uniform_int(-5, 5));
        if (shift != 0) crop = shift_cqt_bins(crop, shift);
        for (size_t b = 0; b < kCqtBins; ++b)
            for (size_t t = 0; t < cfg.crop_len; ++t)
                input.at4(i, 0, b, t) = crop.at(b, t);
    }

    Tape<float> tape;
    auto in_node = make_node<float>(std::move(input), /*requires_grad=*/false);
    const ClassifierInput cls_in = (cfg.loss_mode == LossMode::kJointBnneck)
                                       ? ClassifierInput::kFc
                                       : ClassifierInput::kFt;
    auto out = model.forward(tape, in_node, NormMode::kTrain, cls_in);

    NodePtr<float> loss;
    StepLosses parts;
    NodePtr<float> ce, tri;
    if (cfg.loss_mode != LossMode::kTriOnly) {
        ce = ops::softmax_cross_entropy(tape, out.logits, labels);
        parts.ce = ce->value[0];
    }
    if (cfg.loss_mode != LossMode::kClsOnly) {
        tri = ops::triplet_batch_hard(tape, out.f_t, labels,
                                      static_cast<float>(cfg.alpha));
        parts.tri = tri->value[0];
    }
    if (ce && tri)
        loss = ops::add(tape, ce, tri);
    else
        loss = ce ? ce : tri;
    parts.total = loss->value[0];

    if (!std::isfinite(parts.total)) {
        std::string ids;
        for (size_t i : batch_idx) ids += ds.entries[i].id + " ";
        throw std::runtime_error("train: non-finite loss (ce=" + std::to_string(parts.ce) +
                                 ", triplet=" + std::to_string(parts.tri) +
                                 "); batch: " + ids);
    }

    for (auto* p : model.parameters()) p->zero_grad();
    tape.backward(loss);
    adam_step(model.parameters(), cfg.lr);
    auto clamp_p = [](Parameter<float>* p) {
        if (p) p->value()[0] = std::clamp(p->value()[0], 1.0f, 10.0f);
    };
    clamp_p(model.gem_p());
    clamp_p(model.gem_p_f());
    return parts;
}

double compute_val_map(ResNetIbnModel<float>& model, const LabeledDataset& ds,
                       FeatureCache& cache) {
    // validation queries ranked against the train+val pool; a lone val
    // version per clique would otherwise have no scorable relevant item
    auto val_idx = ds.split_indices("val");
    if (val_idx.empty()) return 0.0;
    auto pool_idx = ds.split_indices("train");
    pool_idx.insert(pool_idx.end(), val_idx.begin(), val_idx.end());
    std::sort(pool_idx.begin(), pool_idx.end());
    EmbeddingStore refs = embed_entries(model, ds, pool_idx, cache,
                                        model.config().embed_dim > 0);
    EmbeddingStore queries;
    for (size_t idx : val_idx) queries.add(ds.entries[idx].id, refs.find(ds.entries[idx].id)->vec);
    std::map<std::string, std::string> cliques;
    for (const auto& e : ds.entries) cliques[e.id] = std::to_string(e.clique_index);
    return evaluate(queries, refs, cliques, /*exclude_self=*/true).map;
}

}  // namespace

TrainResult train(ResNetIbnModel<float>& model, const LabeledDataset& ds,
                  const TrainConfig& cfg, const std::string& out_dir) {
    require(cfg.P * cfg.K_per_class == cfg.batch_size, "train: P*K must equal batch size");
    require(cfg.alpha > 0, "train: alpha must be positive");
    require(cfg.crop_len >= 8, "train: crop_len must be >= 8");

    fs::create_directories(out_dir);
    FeatureCache cache(ds);
    const auto train_idx = ds.split_indices("train");
    require(!train_idx.empty(), "train: empty training split");
    // PK sampling has no natural epoch boundary; one epoch covers the
    // training split about six times so short runs still see enough
    // optimizer steps to converge
    const size_t steps_per_epoch =
        (6 * train_idx.size() + cfg.batch_size - 1) / cfg.batch_size;

    Rng rng(cfg.seed ^ 0x7261696e65724c4cULL);
    TrainResult result;
    result.best_val_map = -1;

    // in-memory snapshot of the best-validation epoch
    std::vector<Tensor<float>> best_params;
    std::vector<Tensor<float>> best_buffers;
    size_t best_epoch = 0;
    double best_map = -1;

    auto snapshot = [&]() {
        best_params.clear();
        best_buffers.clear();
        for (auto* p : model.parameters()) best_params.push_back(p->value());
        for (auto& [name, t] : model.buffers()) best_buffers.push_back(*t);
    };

    std::ofstream csv(fs::path(out_dir) / "log.csv");
    csv << "epoch,ce_loss,triplet_loss,total_loss,val_map,gem_p\n";

    for (size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        double ce = 0, tri = 0, total = 0;
        for (size_t s = 0; s < steps_per_epoch; ++s) {
            auto batch = pk_sample(ds, cfg.P, cfg.K_per_class, rng);
            auto parts = train_step(model, ds, cache, batch, cfg, rng);
            ce += parts.ce;
            tri += parts.tri;
            total += parts.total;
        }
        ce /= steps_per_epoch;
        tri /= steps_per_epoch;
        total /= steps_per_epoch;

        const double val_map = compute_val_map(model, ds, cache);
        EpochLog log{epoch, ce, tri, total, val_map,
                     static_cast<double>(model.gem_p()->value()[0])};
        result.log.push_back(log);
        csv << epoch << "," << ce << "," << tri << "," << total << "," << val_map << ","
            << log.gem_p << "\n";
        csv.flush();

        if (val_map > best_map) {
            best_map = val_map;
            best_epoch = epoch;
            snapshot();
        }
    }

    if (cfg.epochs == 0) {
        best_map = compute_val_map(model, ds, cache);
        best_epoch = 0;
        snapshot();
    }

    result.best_val_map = best_map;
    result.best_epoch = best_epoch;

    // final checkpoint at out_dir, best-validation at out_dir/best
    save_checkpoint(model, cfg, cfg.epochs,
                    result.log.empty() ? best_map : result.log.back().val_map, out_dir,
                    cfg.save_adam_state);
    {
        // restore the snapshot into a scratch copy for the best checkpoint
        std::vector<Tensor<float>> cur_params, cur_buffers;
        for (auto* p : model.parameters()) cur_params.push_back(p->value());
        for (auto& [name, t] : model.buffers()) cur_buffers.push_back(*t);
        size_t i = 0;
        for (auto* p : model.parameters()) p->value() = best_params[i++];
        i = 0;
        for (auto& [name, t] : model.buffers()) *t = best_buffers[i++];
        save_checkpoint(model, cfg, best_epoch, best_map,
                        (fs::path(out_dir) / "best").string(), false);
        i = 0;
        for (auto* p : model.parameters()) p->value() = cur_params[i++];
        i = 0;
        for (auto& [name, t] : model.buffers()) *t = cur_buffers[i++];
    }
    return result;
}

// ------------------------------------------------------------ checkpoint

namespace {

json model_cfg_to_json(const ModelConfig& c) {
    json j;
    j["preset"] = c.preset_name;
    j["stage_blocks"] = c.stage_blocks;
    j["stage_widths"] = c.stage_widths;
    j["block_kind"] = (c.block_kind == BlockKind::kBottleneck) ? "bottleneck" : "basic";
    j["ibn_stages"] = std::vector<size_t>(c.ibn_stages.begin(), c.ibn_stages.end());
    j["num_classes"] = c.num_classes;
    j["gem_p_init"] = c.gem_p_init;
    j["embed_dim"] = c.embed_dim;
    j["gem_split"] = c.gem_split;
    return j;
}

ModelConfig model_cfg_from_json(const json& j) {
    ModelConfig c;
    c.preset_name = j.at("preset").get<std::string>();
    auto blocks = j.at("stage_blocks").get<std::vector<size_t>>();
    auto widths = j.at("stage_widths").get<std::vector<size_t>>();
    require(blocks.size() == 4 && widths.size() == 4, "checkpoint: bad stage arrays");
    std::copy(blocks.begin(), blocks.end(), c.stage_blocks.begin());
    std::copy(widths.begin(), widths.end(), c.stage_widths.begin());
    c.block_kind = (j.at("block_kind").get<std::string>() == "bottleneck")
                       ? BlockKind::kBottleneck
                       : BlockKind::kBasic;
    auto ibn = j.at("ibn_stages").get<std::vector<size_t>>();
    c.ibn_stages = std::set<size_t>(ibn.begin(), ibn.end());
    c.num_classes = j.at("num_classes").get<size_t>();
    c.gem_p_init = j.at("gem_p_init").get<double>();
    c.embed_dim = j.at("embed_dim").get<size_t>();
    c.gem_split = j.at("gem_split").get<bool>();
    return c;
}

json train_cfg_to_json(const TrainConfig& c) {
    json j;
    j["lr"] = c.lr;
    j["batch_size"] = c.batch_size;
    j["alpha"] = c.alpha;
    j["P"] = c.P;
    j["K_per_class"] = c.K_per_class;
    j["epochs"] = c.epochs;
    j["crop_len"] = c.crop_len;
    j["seed"] = c.seed;
    j["loss_mode"] = loss_mode_name(c.loss_mode);
    return j;
}

TrainConfig train_cfg_from_json(const json& j) {
    TrainConfig c;
    c.lr = j.at("lr").get<double>();
    c.batch_size = j.at("batch_size").get<size_t>();
    c.alpha = j.at("alpha").get<double>();
    c.P = j.at("P").get<size_t>();
    c.K_per_class = j.at("K_per_class").get<size_t>();
    c.epochs = j.at("epochs").get<size_t>();
    c.crop_len = j.at("crop_len").get<size_t>();
    c.seed = j.at("seed").get<uint64_t>();
    c.loss_mode = loss_mode_from_name(j.at("loss_mode").get<std::string>());
    return c;
}

}  // namespace

void save_checkpoint(ResNetIbnModel<float>& model, const TrainConfig& cfg, size_t epoch,
                     double val_map, const std::string& dir, bool include_adam) {
    fs::create_directories(dir);
    json manifest;
    manifest["format_version"] = 1;
    manifest["model"] = model_cfg_to_json(model.config());
    manifest["train"] = train_cfg_to_json(cfg);
    manifest["epoch"] = epoch;
    manifest["metrics"] = {{"val_map", val_map}};
    manifest["adam_included"] = include_adam;

    // collect named tensors in table order: params, buffers, adam state
    std::vector<std::pair<std::string, const Tensor<float>*>> table;
    int64_t step_count = 0;
    for (auto* p : model.parameters()) {
        table.emplace_back(p->name, &p->value());
        step_count = p->step_count;
    }
    for (auto& [name, t] : model.buffers()) table.emplace_back(name, t);
    if (include_adam) {
        for (auto* p : model.parameters()) table.emplace_back("adam.m." + p->name, &p->adam_m);
        for (auto* p : model.parameters()) table.emplace_back("adam.v." + p->name, &p->adam_v);
    }
    manifest["step_count"] = step_count;

    json jtable = json::object();
    uint64_t offset = 0;
    std::ofstream bin(fs::path(dir) / "params.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("save_checkpoint: cannot open params.bin in " + dir);
    for (auto& [name, t] : table) {
        const uint64_t bytes = t->size() * sizeof(float);
        jtable[name] = {{"shape", t->shape}, {"byte_offset", offset}, {"byte_len", bytes}};
        bin.write(reinterpret_cast<const char*>(t->data.data()),
                  static_cast<std::streamsize>(bytes));
        offset += bytes;
    }
    manifest["params"] = jtable;

    std::ofstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw std::runtime_error("save_checkpoint: cannot open manifest.json in " + dir);
    mf << manifest.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::string& dir) {
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw std::runtime_error("load_checkpoint: missing manifest.json in " + dir);
    json manifest;
    try {
        mf >> manifest;
    } catch (const std::exception& e) {
        throw std::runtime_error("load_checkpoint: bad manifest.json in " + dir + ": " +
                                 e.what());
    }
    if (manifest.value("format_version", -1) != 1)
        throw std::runtime_error("load_checkpoint: unsupported format_version in " + dir);

    Checkpoint ckpt;
    ckpt.model_cfg = model_cfg_from_json(manifest.at("model"));
    ckpt.train_cfg = train_cfg_from_json(manifest.at("train"));
    ckpt.epoch = manifest.at("epoch").get<size_t>();
    ckpt.val_map = manifest.at("metrics").at("val_map").get<double>();
    ckpt.step_count = manifest.value("step_count", int64_t(0));
    ckpt.has_adam = manifest.value("adam_included", false);
    ckpt.model = std::make_unique<ResNetIbnModel<float>>(ckpt.model_cfg, /*seed=*/0);

    std::ifstream bin(fs::path(dir) / "params.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("load_checkpoint: missing params.bin in " + dir);
    bin.seekg(0, std::ios::end);
    const uint64_t file_len = static_cast<uint64_t>(bin.tellg());

    const json& jtable = manifest.at("params");
    auto load_tensor = [&](const std::string& name, Tensor<float>& dst) {
        require(jtable.contains(name), "load_checkpoint: missing parameter " + name);
        const json& e = jtable.at(name);
        auto shape = e.at("shape").get<std::vector<size_t>>();
        require(shape == dst.shape, "load_checkpoint: shape mismatch for " + name +
                                        ": manifest " + shape_str(shape) + " vs model " +
                                        shape_str(dst.shape));
        const uint64_t off = e.at("byte_offset").get<uint64_t>();
        const uint64_t len = e.at("byte_len").get<uint64_t>();
        require(len == dst.size() * sizeof(float), "load_checkpoint: byte_len mismatch for " + name);
        require(off + len <= file_len, "load_checkpoint: truncated params.bin at " + name);
        bin.seekg(static_cast<std::streamoff>(off));
        bin.read(reinterpret_cast<char*>(dst.data.data()), static_cast<std::streamsize>(len));
        require(static_cast<bool>(bin), "load_checkpoint: read failure at " + name);
    };

    for (auto* p : ckpt.model->parameters()) {
        load_tensor(p->name, p->value());
        p->step_count = ckpt.step_count;
    }
    for (auto& [name, t] : ckpt.model->buffers()) load_tensor(name, *t);
    if (ckpt.has_adam) {
        for (auto* p : ckpt.model->parameters()) load_tensor("adam.m." + p->name, p->adam_m);
        for (auto* p : ckpt.model->parameters()) load_tensor("adam.v." + p->name, p->adam_v);
    }
    return ckpt;
}

}  // namespace coverid
