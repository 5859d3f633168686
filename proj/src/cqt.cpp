#include "coverid/cqt.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "coverid/tensor.hpp"

namespace coverid {

namespace {

constexpr double kPi = 3.14159265358979323846;
const double kQ = 1.0 / (std::pow(2.0, 1.0 / 12.0) - 1.0);

size_t window_length(int bin) {
    const double f = kCqtFmin * std::pow(2.0, bin / 12.0);
    return static_cast<size_t>(std::llround(kQ * kCqtSampleRate / f));
}

}  // namespace

size_t cqt_longest_window() { return window_length(0); }

CqtSpectrogram compute_cqt(const AudioClip& clip) {
    require(clip.sample_rate == kCqtSampleRate,
            "compute_cqt: expected 22050 Hz input, got " + std::to_string(clip.sample_rate));
    const size_t n = clip.samples.size();
    const size_t longest = cqt_longest_window();
    if (n < longest)
        throw std::runtime_error("compute_cqt: clip shorter than the lowest-bin window (" +
                                 std::to_string(n) + " < " + std::to_string(longest) + " samples)");

    const size_t n_frames = n / kCqtHop + 1;
    const size_t pad = longest / 2 + 2;

    // reflection padding (no edge repeat)
    std::vector<float> x(n + 2 * pad);
    for (size_t i = 0; i < x.size(); ++i) {
        int64_t idx = static_cast<int64_t>(i) - static_cast<int64_t>(pad);
        if (idx < 0) idx = -idx;
        if (idx >= static_cast<int64_t>(n)) idx = 2 * static_cast<int64_t>(n) - 2 - idx;
        if (idx < 0) idx = 0;  // degenerate n == 1
        x[i] = clip.samples[static_cast<size_t>(idx)];
    }

    CqtSpectrogram out;
    out.n_frames = n_frames;
    out.values.assign(static_cast<size_t>(kCqtBins) * n_frames, 0.0f);

    std::vector<float> wcos, wsin;
    for (int b = 0; b < kCqtBins; ++b) {
        const double f = kCqtFmin * std::pow(2.0, b / 12.0);
        const size_t L = window_length(b);
        wcos.resize(L);
        wsin.resize(L);
        double wsum = 0;
        for (size_t l = 0; l < L; ++l) {
            const double w = 0.5 * (1.0 - std::cos(2.0 * kPi * l / (L - 1)));
            const double ph = 2.0 * kPi * f * static_cast<double>(l) / kCqtSampleRate;
            wcos[l] = static_cast<float>(w * std::cos(ph));
            wsin[l] = static_cast<float>(-w * std::sin(ph));
            wsum += w;
        }
        const float norm = static_cast<float>(2.0 / wsum);
        for (size_t k = 0; k < n_frames; ++k) {
            // window centered at sample k*hop
            const size_t start = pad + k * kCqtHop - L / 2;
            const float* xs = x.data() + start;
            float re = 0, im = 0;
            for (size_t l = 0; l < L; ++l) {
                re += xs[l] * wcos[l];
                im += xs[l] * wsin[l];
            }
            out.at(static_cast<size_t>(b), k) = norm * std::sqrt(re * re + im * im);
        }
    }
    return out;
}

CqtSpectrogram downsample_time(const CqtSpectrogram& cqt, int factor) {
    require(factor >= 1, "downsample_time: factor must be >= 1");
    require(cqt.downsample_factor == 1, "downsample_time: input already downsampled");
    if (factor == 1) return cqt;

    const size_t T = cqt.n_frames;
    const size_t f = static_cast<size_t>(factor);
    const size_t n_full = T / f;
    const size_t tail = T % f;
    const size_t half = (f + 1) / 2;
    size_t T_out = n_full + ((tail >= half) ? 1 : 0);
    if (T_out == 0) T_out = 1;

    CqtSpectrogram out;
    out.n_frames = T_out;
    out.values.assign(static_cast<size_t>(kCqtBins) * T_out, 0.0f);
    out.fmin = cqt.fmin;
    out.hop_length = cqt.hop_length;
    out.downsample_factor = factor;
    for (size_t b = 0; b < kCqtBins; ++b) {
        for (size_t k = 0; k < T_out; ++k) {
            const size_t begin = k * f;
            const size_t width = (k < n_full) ? f : tail;
            double acc = 0;
            for (size_t t = 0; t < width; ++t) acc += cqt.at(b, begin + t);
            out.at(b, k) = static_cast<float>(acc / width);
        }
    }
    return out;
}

CqtSpectrogram normalize(const CqtSpectrogram& cqt, bool log_compress) {
    CqtSpectrogram out = cqt;
    float mx = 0;
    for (float v : out.values) mx = std::max(mx, v);
    if (mx == 0) return out;
    for (float& v : out.values) v /= mx;
    if (log_compress) {
        float mx2 = 0;
        for (float& v : out.values) {
            v = std::log1p(1000.0f * v);
            mx2 = std::max(mx2, v);
        }
        if (mx2 > 0)
            for (float& v : out.values) v /= mx2;
    }
    return out;
}

CqtSpectrogram shift_cqt_bins(const CqtSpectrogram& cqt, int i) {
    require(i > -kCqtBins && i < kCqtBins, "shift_cqt_bins: |shift| >= 84");
    CqtSpectrogram out = cqt;
    std::fill(out.values.begin(), out.values.end(), 0.0f);
    for (int b = 0; b < kCqtBins; ++b) {
        const int src = b - i;
        if (src < 0 || src >= kCqtBins) continue;
        std::memcpy(&out.values[static_cast<size_t>(b) * cqt.n_frames],
                    &cqt.values[static_cast<size_t>(src) * cqt.n_frames],
                    cqt.n_frames * sizeof(float));
    }
    return out;
}

void write_cqt(const std::string& path, const CqtSpectrogram& cqt) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_cqt: cannot open " + path);
    auto w32 = [&](uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
    f.write("CQT1", 4);
    w32(1);
    w32(kCqtBins);
    w32(static_cast<uint32_t>(cqt.downsample_factor));
    uint64_t nf = cqt.n_frames;
    f.write(reinterpret_cast<const char*>(&nf), 8);
    std::vector<float> frame(kCqtBins);
    for (size_t t = 0; t < cqt.n_frames; ++t) {
        for (size_t b = 0; b < kCqtBins; ++b) frame[b] = cqt.at(b, t);
        f.write(reinterpret_cast<const char*>(frame.data()), kCqtBins * sizeof(float));
    }
}

CqtSpectrogram read_cqt(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_cqt: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "CQT1", 4) != 0)
        throw std::runtime_error("read_cqt: bad magic in " + path);
    uint32_t version = 0, n_bins = 0, factor = 0;
    uint64_t nf = 0;
    f.read(reinterpret_cast<char*>(&version), 4);
    f.read(reinterpret_cast<char*>(&n_bins), 4);
    f.read(reinterpret_cast<char*>(&factor), 4);
    f.read(reinterpret_cast<char*>(&nf), 8);
    if (!f || version != 1) throw std::runtime_error("read_cqt: unsupported version in " + path);
    if (n_bins != kCqtBins) throw std::runtime_error("read_cqt: unexpected bin count in " + path);
    CqtSpectrogram cqt;
    cqt.n_frames = static_cast<size_t>(nf);
    cqt.downsample_factor = static_cast<int>(factor);
    cqt.values.assign(static_cast<size_t>(kCqtBins) * cqt.n_frames, 0.0f);
    std::vector<float> frame(kCqtBins);
    for (size_t t = 0; t < cqt.n_frames; ++t) {
        f.read(reinterpret_cast<char*>(frame.data()), kCqtBins * sizeof(float));
        if (!f) throw std::runtime_error("read_cqt: truncated data in " + path);
        for (size_t b = 0; b < kCqtBins; ++b) cqt.at(b, t) = frame[b];
    }
    return cqt;
}

}  // namespace coverid
