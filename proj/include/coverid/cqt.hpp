#ifndef COVERID_CQT_HPP
#define COVERID_CQT_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "coverid/audio.hpp"

namespace coverid {

constexpr int kCqtBins = 84;
constexpr int kCqtHop = 512;
constexpr int kCqtSampleRate = 22050;
constexpr double kCqtFmin = 32.703;  // C1

// 84 x T nonnegative magnitude matrix, bin-major in memory.
struct CqtSpectrogram {
    size_t n_frames = 0;
    std::vector<float> values;  // values[b * n_frames + t]
    double fmin = kCqtFmin;
    int hop_length = kCqtHop;
    int downsample_factor = 1;

    float& at(size_t bin, size_t frame) { return values[bin * n_frames + frame]; }
    float at(size_t bin, size_t frame) const { return values[bin * n_frames + frame]; }
};

// 84-bin constant-Q magnitude spectrogram, 12 bins/octave, Hann window,
// hop 512, frame k centered at sample k*512 with reflection padding.
// Requires a 22050 Hz clip at least as long as the lowest-bin window.
CqtSpectrogram compute_cqt(const AudioClip& clip);

// length of the lowest-bin analysis window in samples
size_t cqt_longest_window();

// Non-overlapping window means along time.  A trailing partial window
// of width w is kept iff w >= ceil(factor/2); a too-short input keeps
// its single partial mean so at least one frame is always produced.
CqtSpectrogram downsample_time(const CqtSpectrogram& cqt, int factor);

// Divide by the global max (no-op on all-zero input); optionally apply
// x -> ln(1 + 1000 x) and rescale back to max 1.
CqtSpectrogram normalize(const CqtSpectrogram& cqt, bool log_compress);

// Move rows by i toward higher bins (i > 0); vacated rows are
// zero-filled.  |i| >= 84 is an error.
CqtSpectrogram shift_cqt_bins(const CqtSpectrogram& cqt, int i);

// .cqt feature file: magic "CQT1", u32 version=1, u32 n_bins=84,
// u32 downsample_factor, u64 n_frames, then frame-major f32 values.
void write_cqt(const std::string& path, const CqtSpectrogram& cqt);
CqtSpectrogram read_cqt(const std::string& path);

}  // namespace coverid

#endif
