#include "coverid/audio.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "coverid/tensor.hpp"

namespace coverid {

namespace {

uint32_t read_u32(const uint8_t* p) {
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}
uint16_t read_u16(const uint8_t* p) {
    return static_cast<uint16_t>(p[0]) | (static_cast<uint16_t>(p[1]) << 8);
}

double kaiser_i0(double x) {
    // series expansion of the zeroth-order modified Bessel function
    double sum = 1.0, term = 1.0;
    const double hx = x / 2.0;
    for (int k = 1; k < 64; ++k) {
        term *= (hx / k) * (hx / k);
        sum += term;
        if (term < 1e-16 * sum) break;
    }
    return sum;
}

}  // namespace

AudioClip load_wav(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_wav: cannot open file: " + path);
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
    if (buf.size() < 44 || std::memcmp(buf.data(), "RIFF", 4) != 0 ||
        std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
        throw std::runtime_error("load_wav: malformed RIFF/WAVE header: " + path);

    uint16_t format = 0, channels = 0, bits = 0;
    uint32_t rate = 0;
    const uint8_t* data = nullptr;
    size_t data_len = 0;
    size_t pos = 12;
    while (pos + 8 <= buf.size()) {
        const char* id = reinterpret_cast<const char*>(buf.data() + pos);
        uint32_t len = read_u32(buf.data() + pos + 4);
        if (pos + 8 + len > buf.size()) len = static_cast<uint32_t>(buf.size() - pos - 8);
        if (std::memcmp(id, "fmt ", 4) == 0 && len >= 16) {
            format = read_u16(buf.data() + pos + 8);
            channels = read_u16(buf.data() + pos + 10);
            rate = read_u32(buf.data() + pos + 12);
            bits = read_u16(buf.data() + pos + 22);
        } else if (std::memcmp(id, "data", 4) == 0) {
            data = buf.data() + pos + 8;
            data_len = len;
        }
        pos += 8 + len + (len & 1);
    }
    if (!data || rate == 0 || channels == 0)
        throw std::runtime_error("load_wav: missing fmt/data chunk: " + path);
    if (channels > 2)
        throw std::runtime_error("load_wav: unsupported channel count " +
                                 std::to_string(channels) + ": " + path);

    const bool pcm16 = (format == 1 && bits == 16);
    const bool pcm24 = (format == 1 && bits == 24);
    const bool f32 = (format == 3 && bits == 32);
    if (!pcm16 && !pcm24 && !f32)
        throw std::runtime_error("load_wav: unsupported codec (format " +
                                 std::to_string(format) + ", " + std::to_string(bits) +
                                 " bits): " + path);

    const size_t bytes_per = bits / 8;
    const size_t frames = data_len / (bytes_per * channels);
    if (frames == 0) throw std::runtime_error("load_wav: empty audio data: " + path);

    AudioClip clip;
    clip.sample_rate = static_cast<int>(rate);
    clip.samples.resize(frames);
    for (size_t i = 0; i < frames; ++i) {
        double acc = 0;
        for (size_t c = 0; c < channels; ++c) {
            const uint8_t* p = data + (i * channels + c) * bytes_per;
            double v;
            if (pcm16) {
                int16_t s = static_cast<int16_t>(read_u16(p));
                v = s / 32768.0;
            } else if (pcm24) {
                int32_t s = static_cast<int32_t>(p[0]) | (static_cast<int32_t>(p[1]) << 8) |
                            (static_cast<int32_t>(p[2]) << 16);
                if (s & 0x800000) s |= ~0xFFFFFF;
                v = s / 8388608.0;
            } else {
                float fv;
                std::memcpy(&fv, p, 4);
                v = fv;
            }
            acc += v;
        }
        clip.samples[i] = static_cast<float>(acc / channels);
    }
    return clip;
}

void save_wav(const std::string& path, const AudioClip& clip) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_wav: cannot open file: " + path);
    auto w16 = [&](uint16_t v) { f.put(static_cast<char>(v & 0xff)); f.put(static_cast<char>(v >> 8)); };
    auto w32 = [&](uint32_t v) {
        for (int i = 0; i < 4; ++i) f.put(static_cast<char>((v >> (8 * i)) & 0xff));
    };
    const uint32_t n = static_cast<uint32_t>(clip.samples.size());
    f.write("RIFF", 4);
    w32(36 + n * 2);
    f.write("WAVE", 4);
    f.write("fmt ", 4);
    w32(16);
    w16(1);  // PCM
    w16(1);  // mono
    w32(static_cast<uint32_t>(clip.sample_rate));
    w32(static_cast<uint32_t>(clip.sample_rate) * 2);
    w16(2);
    w16(16);
    f.write("data", 4);
    w32(n * 2);
    for (float s : clip.samples) {
        double c = std::max(-1.0, std::min(1.0, static_cast<double>(s)));
        int16_t v = static_cast<int16_t>(std::lround(c * 32767.0));
        w16(static_cast<uint16_t>(v));
    }
}

AudioClip resample(const AudioClip& clip, int target_rate) {
    require(!clip.samples.empty(), "resample: empty clip");
    require(target_rate > 0, "resample: target rate must be positive");
    if (clip.sample_rate == target_rate) return clip;

    const double ratio = static_cast<double>(target_rate) / clip.sample_rate;
    const size_t n_in = clip.samples.size();
    const size_t n_out = static_cast<size_t>(std::llround(n_in * ratio));

    constexpr int kHalfTaps = 32;  // 64 taps per phase
    constexpr double kBeta = 8.6;
    const double cutoff = std::min(1.0, ratio);
    const double i0b = kaiser_i0(kBeta);

    AudioClip out;
    out.sample_rate = target_rate;
    out.samples.resize(n_out);
    for (size_t k = 0; k < n_out; ++k) {
        const double t = k / ratio;  // position in input samples
        const int64_t base = static_cast<int64_t>(std::floor(t));
        double acc = 0;
        for (int64_t i = base - kHalfTaps + 1; i <= base + kHalfTaps; ++i) {
            if (i < 0 || i >= static_cast<int64_t>(n_in)) continue;
            const double x = i - t;
            const double u = x / kHalfTaps;
            if (u <= -1.0 || u >= 1.0) continue;
            const double win = kaiser_i0(kBeta * std::sqrt(1.0 - u * u)) / i0b;
            const double arg = 3.14159265358979323846 * cutoff * x;
            const double sinc = (std::abs(arg) < 1e-12) ? 1.0 : std::sin(arg) / arg;
            acc += clip.samples[static_cast<size_t>(i)] * cutoff * sinc * win;
        }
        out.samples[k] = static_cast<float>(acc);
    }
    return out;
}

}  // namespace coverid
