#include "coverid/synth.hpp"

#include <cmath>
#include <filesystem>

#include "coverid/cqt.hpp"
#include "coverid/tensor.hpp"

namespace coverid {

namespace {

constexpr double kPi = 3.14159265358979323846;
const int kScale[7] = {0, 2, 4, 5, 7, 9, 11};  // major

int note_midi(const SongSpec& spec, const SongSpec::Note& n) {
    return spec.root_midi + kScale[n.degree % 7] + 12 * (n.degree / 7);
}

}  // namespace

double SongSpec::duration_seconds() const {
    double beats = 0;
    for (const auto& n : notes) beats += n.beats;
    return beats * 60.0 / tempo_bpm;
}

CoverParams CoverParams::identity(const SongSpec& spec) {
    CoverParams p;
    p.semitone_shift = 0;
    p.tempo_ratio = 1.0;
    p.snr_db = std::nullopt;
    for (int i = 0; i < 3; ++i) p.harmonic_weights[i] = spec.harmonic_weights[i];
    p.gain = 1.0;
    return p;
}

SongSpec gen_song(Rng& rng) {
    for (int attempt = 0; attempt < 1000; ++attempt) {
        SongSpec spec;
        // keep fundamentals >= 10 bins inside the CQT range even at shift +-5
        spec.root_midi = static_cast<int>(rng.uniform_int(40, 70));
        spec.tempo_bpm = rng.uniform(70.0, 160.0);
        const int n_notes = static_cast<int>(rng.uniform_int(16, 64));
        static const double kBeats[4] = {0.5, 1.0, 1.5, 2.0};
        spec.notes.resize(n_notes);
        for (auto& n : spec.notes) {
            n.degree = static_cast<int>(rng.uniform_int(0, 13));
            n.beats = kBeats[rng.uniform_int(0, 3)];
        }
        double w1 = rng.uniform(0.55, 0.8);
        double split = rng.uniform(0.2, 0.8);
        spec.harmonic_weights[0] = w1;
        spec.harmonic_weights[1] = (1.0 - w1) * split;
        spec.harmonic_weights[2] = (1.0 - w1) * (1.0 - split);
        const double dur = spec.duration_seconds();
        if (dur >= 12.0 && dur <= 70.0) return spec;
    }
    throw std::runtime_error("gen_song: rejection sampling failed");
}

CoverParams gen_cover_params(const SongSpec& spec, Rng& rng) {
    CoverParams p;
    p.semitone_shift = static_cast<int>(rng.uniform_int(-5, 5));
    p.tempo_ratio = rng.uniform(0.7, 1.4);
    p.snr_db = rng.uniform(20.0, 40.0);
    double w1 = rng.uniform(0.55, 0.8);
    double split = rng.uniform(0.2, 0.8);
    p.harmonic_weights[0] = w1;
    p.harmonic_weights[1] = (1.0 - w1) * split;
    p.harmonic_weights[2] = (1.0 - w1) * (1.0 - split);
    p.gain = rng.uniform(0.5, 1.0);
    (void)spec;
    return p;
}

AudioClip render(const SongSpec& spec, const CoverParams& params, Rng& noise_rng) {
    const int sr = kCqtSampleRate;
    const double shift = std::pow(2.0, params.semitone_shift / 12.0);

    AudioClip clip;
    clip.sample_rate = sr;
    std::vector<double> sig;
    for (const auto& note : spec.notes) {
        const double f = 440.0 * std::pow(2.0, (note_midi(spec, note) - 69) / 12.0) * shift;
        const double dur = note.beats * 60.0 / spec.tempo_bpm / params.tempo_ratio;
        const size_t n = static_cast<size_t>(std::llround(dur * sr));
        const size_t ramp = std::min<size_t>(static_cast<size_t>(0.010 * sr), n / 2);
        for (size_t i = 0; i < n; ++i) {
            const double t = static_cast<double>(i) / sr;
            double v = 0;
            for (int h = 1; h <= 3; ++h)
                v += params.harmonic_weights[h - 1] * std::sin(2.0 * kPi * h * f * t);
            double env = 1.0;
            if (i < ramp)
                env = 0.5 * (1.0 - std::cos(kPi * static_cast<double>(i) / ramp));
            else if (n - 1 - i < ramp)
                env = 0.5 * (1.0 - std::cos(kPi * static_cast<double>(n - 1 - i) / ramp));
            sig.push_back(v * env);
        }
    }
    require(!sig.empty(), "render: empty song");

    if (params.snr_db) {
        double power = 0;
        for (double v : sig) power += v * v;
        power /= static_cast<double>(sig.size());
        const double noise_std = std::sqrt(power) / std::pow(10.0, *params.snr_db / 20.0);
        for (double& v : sig) v += noise_std * noise_rng.normal();
    }

    double peak = 0;
    for (double v : sig) peak = std::max(peak, std::abs(v));
    const double scale = (peak > 0) ? 0.9 * params.gain / peak : 0.0;
    clip.samples.resize(sig.size());
    for (size_t i = 0; i < sig.size(); ++i)
        clip.samples[i] = static_cast<float>(sig[i] * scale);
    return clip;
}

DatasetManifest build_dataset(const BuildDatasetOptions& opt) {
    namespace fs = std::filesystem;
    require(opt.n_cliques >= 1 && opt.versions_per_clique >= 1, "build_dataset: counts");
    const int V = opt.versions_per_clique;
    // per-clique split counts; test gets at least 2 versions so a
    // test-only store remains scorable under exclude-self evaluation
    int n_val = std::max(1, V * 15 / 100);
    int n_test = std::max(2, V * 15 / 100);
    int n_train = V - n_val - n_test;
    require(n_train >= 1, "build_dataset: need at least " + std::to_string(n_val + n_test + 1) +
                              " versions per clique");

    fs::create_directories(fs::path(opt.out_dir) / "features");
    if (opt.write_wav) fs::create_directories(fs::path(opt.out_dir) / "wav");

    Rng master(opt.seed);
    DatasetManifest manifest;
    for (int c = 0; c < opt.n_cliques; ++c) {
        Rng rng = master.fork(static_cast<uint64_t>(c) + 1);
        const SongSpec spec = gen_song(rng);
        char cname[32];
        std::snprintf(cname, sizeof(cname), "clique%03d", c);
        for (int v = 0; v < V; ++v) {
            const CoverParams params =
                (v == 0) ? CoverParams::identity(spec) : gen_cover_params(spec, rng);
            AudioClip clip = render(spec, params, rng);
            CqtSpectrogram cqt = compute_cqt(clip);
            cqt = downsample_time(cqt, opt.downsample_factor);
            cqt = normalize(cqt, opt.log_compress);

            char id[48];
            std::snprintf(id, sizeof(id), "%s_v%d", cname, v);
            const std::string feat =
                (fs::path(opt.out_dir) / "features" / (std::string(id) + ".cqt")).string();
            write_cqt(feat, cqt);
            if (opt.write_wav)
                save_wav((fs::path(opt.out_dir) / "wav" / (std::string(id) + ".wav")).string(),
                         clip);

            ManifestEntry e;
            e.id = id;
            e.feature = feat;
            e.clique = cname;
            e.split = (v < n_train) ? "train" : (v < n_train + n_val) ? "val" : "test";
            manifest.entries.push_back(std::move(e));
        }
    }
    write_manifest((fs::path(opt.out_dir) / "manifest.jsonl").string(), manifest);
    return manifest;
}

}  // namespace coverid
