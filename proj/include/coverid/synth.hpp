#ifndef COVERID_SYNTH_HPP
#define COVERID_SYNTH_HPP

#include <optional>
#include <string>
#include <vector>

#include "coverid/audio.hpp"
#include "coverid/dataset.hpp"
#include "coverid/rng.hpp"

namespace coverid {

// A melody from a 7-degree scale across 2 octaves.
struct SongSpec {
    int root_midi = 60;
    struct Note {
        int degree;      // [0, 13]
        double beats;
    };
    std::vector<Note> notes;        // 16..64 entries
    double tempo_bpm = 120;         // [70, 160]
    double harmonic_weights[3] = {0.6, 0.25, 0.15};  // positive, sum 1

    double duration_seconds() const;
};

struct CoverParams {
    int semitone_shift = 0;              // [-5, 5]
    double tempo_ratio = 1.0;            // [0.7, 1.4]
    std::optional<double> snr_db;        // >= 20; nullopt = no noise
    double harmonic_weights[3] = {0.6, 0.25, 0.15};
    double gain = 1.0;                   // [0.5, 1.0]

    static CoverParams identity(const SongSpec& spec);
};

// Deterministic under the rng stream.  Rendered pitches stay at least 5
// CQT bins inside [C1, B7] after any shift in [-5, +5], and the base
// duration lands in [12, 70] s so downsampled features keep T >= 8.
SongSpec gen_song(Rng& rng);

CoverParams gen_cover_params(const SongSpec& spec, Rng& rng);

// Note-level rendering at 22050 Hz: 3 harmonics with a 10 ms
// raised-cosine attack/release, pitch scaled by 2^(shift/12), durations
// by 1/tempo_ratio, white noise at snr_db, peak-normalized to 0.9*gain.
AudioClip render(const SongSpec& spec, const CoverParams& params, Rng& noise_rng);

struct BuildDatasetOptions {
    int n_cliques = 30;
    int versions_per_clique = 5;
    uint64_t seed = 42;
    std::string out_dir;
    bool write_wav = false;
    int downsample_factor = 20;
    bool log_compress = false;
};

// Renders one identity version plus covers per clique, extracts .cqt
// features, assigns per-clique version-index splits and writes
// out_dir/manifest.jsonl.
DatasetManifest build_dataset(const BuildDatasetOptions& opt);

}  // namespace coverid

#endif
