#ifndef COVERID_TRAINING_HPP
#define COVERID_TRAINING_HPP

#include <memory>
#include <string>
#include <vector>

#include "coverid/dataset.hpp"
#include "coverid/model.hpp"
#include "coverid/retrieval.hpp"
#include "coverid/rng.hpp"

namespace coverid {

enum class LossMode { kClsOnly, kTriOnly, kJointNaive, kJointBnneck };

std::string loss_mode_name(LossMode m);
LossMode loss_mode_from_name(const std::string& s);

struct TrainConfig {
    double lr = 0.0004;
    size_t batch_size = 32;
    double alpha = 0.3;          // triplet margin
    size_t P = 8;                // classes per batch
    size_t K_per_class = 4;
    size_t epochs = 50;
    size_t crop_len = 80;        // downsampled frames; 400 for the full preset
    uint64_t seed = 42;
    LossMode loss_mode = LossMode::kJointBnneck;
    bool save_adam_state = true;
};

struct EpochLog {
    size_t epoch = 0;
    double ce_loss = 0;
    double triplet_loss = 0;
    double total_loss = 0;
    double val_map = 0;
    double gem_p = 0;
};

struct TrainResult {
    std::vector<EpochLog> log;
    double best_val_map = 0;
    size_t best_epoch = 0;
};

// In-memory feature store keyed by dataset entry index.
class FeatureCache {
public:
    explicit FeatureCache(const LabeledDataset& ds) : ds_(ds), cache_(ds.entries.size()) {}
    const CqtSpectrogram& get(size_t idx);

private:
    const LabeledDataset& ds_;
    std::vector<std::unique_ptr<CqtSpectrogram>> cache_;
};

// P distinct cliques, K entries each (with replacement iff the clique
// has fewer than K train entries).  Returns dataset entry indices.
std::vector<size_t> pk_sample(const LabeledDataset& ds, size_t P, size_t K_per_class,
                              Rng& rng);

// Fixed-length crop for batching: random contiguous crop of crop_len
// frames in train mode (zero-padded right when shorter); full length in
// eval mode.
CqtSpectrogram crop_or_pad(const CqtSpectrogram& cqt, size_t crop_len, Rng& rng,
                           bool train_mode);

// Standard bias-corrected Adam; gem_p-style exponents are clamped to
// [1, 10] by the caller after the step.
void adam_step(std::vector<Parameter<float>*>& params, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

// Joint classification + batch-hard triplet training.  Writes the final
// checkpoint to out_dir, the best-validation checkpoint to out_dir/best,
// and a per-epoch CSV log to out_dir/log.csv.
TrainResult train(ResNetIbnModel<float>& model, const LabeledDataset& ds,
                  const TrainConfig& cfg, const std::string& out_dir);

// Embeddings of the given dataset entries (full-length, eval mode).
EmbeddingStore embed_entries(ResNetIbnModel<float>& model, const LabeledDataset& ds,
                             const std::vector<size_t>& indices, FeatureCache& cache,
                             bool use_projection);

// -------- checkpoint format: manifest.json + params.bin ----------------

struct Checkpoint {
    ModelConfig model_cfg;
    TrainConfig train_cfg;
    size_t epoch = 0;
    double val_map = 0;
    int64_t step_count = 0;
    bool has_adam = false;
    std::unique_ptr<ResNetIbnModel<float>> model;
};

void save_checkpoint(ResNetIbnModel<float>& model, const TrainConfig& cfg, size_t epoch,
                     double val_map, const std::string& dir, bool include_adam);
Checkpoint load_checkpoint(const std::string& dir);

}  // namespace coverid

#endif
