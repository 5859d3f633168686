#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "coverid/cqt.hpp"
#include "coverid/retrieval.hpp"
#include "coverid/synth.hpp"

using namespace coverid;
namespace fs = std::filesystem;

namespace {

// mean-over-time CQT magnitude profile of a clip
std::vector<float> pitch_profile(const AudioClip& clip) {
    CqtSpectrogram s = compute_cqt(clip);
    std::vector<float> prof(84, 0.0f);
    for (size_t b = 0; b < 84; ++b) {
        double acc = 0;
        for (size_t t = 0; t < s.n_frames; ++t) acc += s.at(b, t);
        prof[b] = static_cast<float>(acc / s.n_frames);
    }
    return prof;
}

// lag in [-7, 7] that best aligns two profiles under cosine similarity
int best_lag(const std::vector<float>& ref, const std::vector<float>& shifted) {
    CqtSpectrogram r;
    r.n_frames = 1;
    r.values = ref;
    int arg = 0;
    double best = -2;
    for (int lag = -7; lag <= 7; ++lag) {
        CqtSpectrogram moved = shift_cqt_bins(r, lag);
        const double sim = cosine_similarity(moved.values, shifted);
        if (sim > best) {
            best = sim;
            arg = lag;
        }
    }
    return arg;
}

std::vector<char> slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f);
    return std::vector<char>(std::istreambuf_iterator<char>(f), {});
}

}  // namespace

TEST_CASE("gen_song: determinism and documented bounds") {
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        Rng r1(seed), r2(seed);
        SongSpec a = gen_song(r1);
        SongSpec b = gen_song(r2);
        CHECK(a.root_midi == b.root_midi);
        REQUIRE(a.notes.size() == b.notes.size());
        for (size_t i = 0; i < a.notes.size(); ++i) {
            CHECK(a.notes[i].degree == b.notes[i].degree);
            CHECK(a.notes[i].beats == b.notes[i].beats);
        }
        CHECK(a.tempo_bpm == b.tempo_bpm);

        CHECK(a.notes.size() >= 16);
        CHECK(a.notes.size() <= 64);
        for (const auto& n : a.notes) {
            CHECK(n.degree >= 0);
            CHECK(n.degree <= 13);
            CHECK(n.beats > 0);
        }
        CHECK(a.tempo_bpm >= 70);
        CHECK(a.tempo_bpm <= 160);
        CHECK(a.duration_seconds() >= 12.0);
        CHECK(a.duration_seconds() <= 70.0);
        double wsum = 0;
        for (double w : a.harmonic_weights) {
            CHECK(w > 0);
            wsum += w;
        }
        CHECK(wsum == doctest::Approx(1.0));
    }
}

TEST_CASE("gen_cover_params stays in range") {
    Rng song_rng(3);
    SongSpec spec = gen_song(song_rng);
    Rng rng(4);
    for (int i = 0; i < 50; ++i) {
        CoverParams p = gen_cover_params(spec, rng);
        CHECK(p.semitone_shift >= -5);
        CHECK(p.semitone_shift <= 5);
        CHECK(p.tempo_ratio >= 0.7);
        CHECK(p.tempo_ratio <= 1.4);
        if (p.snr_db) CHECK(*p.snr_db >= 20.0);
        CHECK(p.gain >= 0.5);
        CHECK(p.gain <= 1.0);
    }
    CoverParams id = CoverParams::identity(spec);
    CHECK(id.semitone_shift == 0);
    CHECK(id.tempo_ratio == 1.0);
    CHECK_FALSE(id.snr_db.has_value());
}

TEST_CASE("render: determinism, peak level, sample rate") {
    Rng song_rng(7);
    SongSpec spec = gen_song(song_rng);
    CoverParams p = CoverParams::identity(spec);
    Rng n1(1), n2(1);
    AudioClip a = render(spec, p, n1);
    AudioClip b = render(spec, p, n2);
    CHECK(a.samples == b.samples);
    CHECK(a.sample_rate == 22050);

    float peak = 0;
    for (float s : a.samples) peak = std::max(peak, std::abs(s));
    CHECK(peak == doctest::Approx(0.9 * p.gain).epsilon(1e-3));
}

TEST_CASE("render: tempo ratio scales duration inversely") {
    Rng song_rng(8);
    SongSpec spec = gen_song(song_rng);
    CoverParams base = CoverParams::identity(spec);
    CoverParams fast = base;
    fast.tempo_ratio = 1.4;
    Rng n1(1), n2(1);
    const double len0 = static_cast<double>(render(spec, base, n1).samples.size());
    const double len1 = static_cast<double>(render(spec, fast, n2).samples.size());
    CHECK(len0 / len1 == doctest::Approx(1.4).epsilon(0.02));
    CHECK(len0 / 22050.0 == doctest::Approx(spec.duration_seconds()).epsilon(0.02));
}

TEST_CASE("render: semitone shift moves the CQT profile by that many bins") {
    Rng song_rng(9);
    SongSpec spec = gen_song(song_rng);
    CoverParams orig = CoverParams::identity(spec);
    Rng nro(1);
    std::vector<float> ref = pitch_profile(render(spec, orig, nro));
    for (int k : {-5, -2, 1, 3, 5}) {
        CoverParams shifted = orig;
        shifted.semitone_shift = k;
        Rng nrc(1);
        std::vector<float> cover = pitch_profile(render(spec, shifted, nrc));
        CHECK(best_lag(ref, cover) == k);
    }
}

TEST_CASE("build_dataset: manifest layout, splits, byte determinism") {
    BuildDatasetOptions opt;
    opt.n_cliques = 2;
    opt.versions_per_clique = 5;
    opt.seed = 11;
    opt.out_dir = (fs::temp_directory_path() / "synth_ds_a").string();
    DatasetManifest m = build_dataset(opt);

    REQUIRE(m.entries.size() == 10);
    std::set<std::string> ids;
    std::map<std::string, std::map<std::string, int>> split_counts;
    for (const auto& e : m.entries) {
        ids.insert(e.id);
        split_counts[e.clique][e.split]++;
        CqtSpectrogram s = read_cqt(e.feature);  // file exists and parses
        CHECK(s.n_frames >= 8);
        CHECK(s.downsample_factor == 20);
    }
    CHECK(ids.size() == 10);
    REQUIRE(split_counts.size() == 2);
    for (auto& [clique, counts] : split_counts) {
        CHECK(counts["train"] == 2);
        CHECK(counts["val"] == 1);
        CHECK(counts["test"] == 2);
    }

    // manifest on disk round-trips to the returned value
    DatasetManifest reread =
        read_manifest((fs::path(opt.out_dir) / "manifest.jsonl").string());
    REQUIRE(reread.entries.size() == m.entries.size());
    for (size_t i = 0; i < m.entries.size(); ++i) {
        CHECK(reread.entries[i].id == m.entries[i].id);
        CHECK(reread.entries[i].split == m.entries[i].split);
        CHECK(reread.entries[i].clique == m.entries[i].clique);
    }

    BuildDatasetOptions opt2 = opt;
    opt2.out_dir = (fs::temp_directory_path() / "synth_ds_b").string();
    DatasetManifest m2 = build_dataset(opt2);
    for (size_t i = 0; i < m.entries.size(); ++i)
        CHECK(slurp(m.entries[i].feature) == slurp(m2.entries[i].feature));
}

TEST_CASE("covers correlate with their original after transposition search") {
    BuildDatasetOptions opt;
    opt.n_cliques = 2;
    opt.versions_per_clique = 4;
    opt.seed = 21;
    opt.out_dir = (fs::temp_directory_path() / "synth_ds_c").string();
    DatasetManifest m = build_dataset(opt);

    auto profile_of = [](const ManifestEntry& e) {
        CqtSpectrogram s = read_cqt(e.feature);
        std::vector<float> prof(84, 0.0f);
        for (size_t b = 0; b < 84; ++b) {
            double acc = 0;
            for (size_t t = 0; t < s.n_frames; ++t) acc += s.at(b, t);
            prof[b] = static_cast<float>(acc / s.n_frames);
        }
        return prof;
    };
    auto lag_sim = [](const std::vector<float>& a, const std::vector<float>& b) {
        CqtSpectrogram r;
        r.n_frames = 1;
        r.values = a;
        double best = -2;
        for (int lag = -7; lag <= 7; ++lag)
            best = std::max(best,
                            cosine_similarity(shift_cqt_bins(r, lag).values, b));
        return best;
    };

    std::map<std::string, std::vector<std::vector<float>>> by_clique;
    for (const auto& e : m.entries) by_clique[e.clique].push_back(profile_of(e));
    REQUIRE(by_clique.size() == 2);
    double within = 0, across = 0;
    size_t nw = 0, na = 0;
    auto it = by_clique.begin();
    const auto& c0 = it->second;
    const auto& c1 = std::next(it)->second;
    for (size_t i = 0; i < c0.size(); ++i)
        for (size_t j = i + 1; j < c0.size(); ++j) {
            within += lag_sim(c0[i], c0[j]) + lag_sim(c1[i], c1[j]);
            nw += 2;
        }
    for (const auto& a : c0)
        for (const auto& b : c1) {
            across += lag_sim(a, b);
            ++na;
        }
    CHECK(within / nw > across / na);
}
