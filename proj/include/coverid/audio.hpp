#ifndef COVERID_AUDIO_HPP
#define COVERID_AUDIO_HPP

#include <string>
#include <vector>

namespace coverid {

// Mono audio in [-1, 1].
struct AudioClip {
    std::vector<float> samples;
    int sample_rate = 0;
};

// Reads a RIFF/WAVE file; PCM 16/24-bit or 32-bit float, 1 or 2
// channels.  Stereo is downmixed by per-sample mean; integer PCM is
// scaled by the type's max magnitude.
AudioClip load_wav(const std::string& path);

// 16-bit PCM writer (used by the corpus generator's --wav flag).
void save_wav(const std::string& path, const AudioClip& clip);

// Band-limited resampling: windowed sinc, Kaiser window, 64 taps per
// phase.  Output length = round(N * target / source).  Same-rate input
// is returned unchanged.
AudioClip resample(const AudioClip& clip, int target_rate);

}  // namespace coverid

#endif
