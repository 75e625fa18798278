#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "audiotf/common.hpp"

namespace audiotf {

constexpr int kSampleRate = 16000;
constexpr int kFrameLen = 400;   // 25 ms at 16 kHz
constexpr int kNumFrames = 40;   // 1 s
constexpr int kChunkLen = kSampleRate;

struct AudioClip {
  std::vector<double> samples;  // mono, 16 kHz, in [-1, 1]
  std::vector<float> labels;    // multi-hot
  std::string source_id;
};

struct Example {
  std::vector<double> samples;  // exactly 16000, framed as [40, 400] row-major
  std::vector<float> target;
  std::string source_id;
};

// ---------------------------------------------------------------------------
// WAV decode/encode: RIFF, PCM 16-bit or IEEE float 32-bit, 1-2 channels.

struct WavData {
  std::vector<double> samples;  // downmixed mono, [-1, 1]
  int sample_rate = 0;
};

namespace wav_detail {

inline std::uint32_t rd_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}
inline std::uint16_t rd_u16(const unsigned char* p) {
  return std::uint16_t(p[0] | (p[1] << 8));
}

}  // namespace wav_detail

inline WavData decode_wav(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open wav file: " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(is)),
                                 std::istreambuf_iterator<char>());
  auto fail = [&](size_t off, const std::string& what) {
    throw FormatError(path + ": " + what + " at offset " + std::to_string(off));
  };
  if (buf.size() < 12) fail(0, "file too short for RIFF header");
  if (std::memcmp(buf.data(), "RIFF", 4) != 0) fail(0, "missing RIFF magic");
  if (std::memcmp(buf.data() + 8, "WAVE", 4) != 0) fail(8, "missing WAVE tag");

  int channels = 0, bits = 0, fmt_tag = 0, rate = 0;
  bool have_fmt = false;
  std::vector<double> mono;
  size_t off = 12;
  while (off + 8 <= buf.size()) {
    const std::string id(reinterpret_cast<const char*>(buf.data() + off), 4);
    const std::uint32_t len = wav_detail::rd_u32(buf.data() + off + 4);
    const size_t body = off + 8;
    if (body + len > buf.size()) fail(off, "chunk '" + id + "' overruns file");
    if (id == "fmt ") {
      if (len < 16) fail(off, "fmt chunk too short");
      fmt_tag = wav_detail::rd_u16(buf.data() + body);
      channels = wav_detail::rd_u16(buf.data() + body + 2);
      rate = int(wav_detail::rd_u32(buf.data() + body + 4));
      bits = wav_detail::rd_u16(buf.data() + body + 14);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) fail(off, "data chunk before fmt chunk");
      if (channels < 1 || channels > 2) fail(off, "unsupported channel count " + std::to_string(channels));
      if (fmt_tag == 1 && bits == 16) {
        const size_t n = len / (2 * size_t(channels));
        mono.resize(n);
        for (size_t i = 0; i < n; ++i) {
          double acc = 0;
          for (int c = 0; c < channels; ++c) {
            const unsigned char* p = buf.data() + body + (i * channels + c) * 2;
            const std::int16_t s = std::int16_t(wav_detail::rd_u16(p));
            acc += double(s) / 32768.0;
          }
          mono[i] = acc / channels;
        }
      } else if (fmt_tag == 3 && bits == 32) {
        const size_t n = len / (4 * size_t(channels));
        mono.resize(n);
        for (size_t i = 0; i < n; ++i) {
          double acc = 0;
          for (int c = 0; c < channels; ++c) {
            std::uint32_t u = wav_detail::rd_u32(buf.data() + body + (i * channels + c) * 4);
            float f;
            std::memcpy(&f, &u, 4);
            acc += double(f);
          }
          mono[i] = acc / channels;
        }
      } else {
        fail(off, "unsupported codec (format tag " + std::to_string(fmt_tag) + ", " +
                      std::to_string(bits) + " bits)");
      }
      WavData out;
      out.samples = std::move(mono);
      out.sample_rate = rate;
      if (out.samples.empty()) fail(off, "empty data chunk");
      return out;
    }
    off = body + len + (len & 1);  // chunks are word aligned
  }
  fail(off, "no data chunk found");
  return {};
}

inline void write_wav_f32(const std::string& path, const std::vector<double>& samples, int rate) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open wav file for writing: " + path);
  auto w16 = [&](std::uint16_t v) {
    unsigned char b[2] = {(unsigned char)(v & 0xff), (unsigned char)(v >> 8)};
    os.write(reinterpret_cast<char*>(b), 2);
  };
  auto w32 = [&](std::uint32_t v) {
    unsigned char b[4] = {(unsigned char)(v & 0xff), (unsigned char)((v >> 8) & 0xff),
                          (unsigned char)((v >> 16) & 0xff), (unsigned char)((v >> 24) & 0xff)};
    os.write(reinterpret_cast<char*>(b), 4);
  };
  const std::uint32_t data_len = std::uint32_t(samples.size() * 4);
  os.write("RIFF", 4);
  w32(36 + data_len);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  w32(16);
  w16(3);  // IEEE float
  w16(1);
  w32(std::uint32_t(rate));
  w32(std::uint32_t(rate) * 4);
  w16(4);
  w16(32);
  os.write("data", 4);
  w32(data_len);
  for (double s : samples) {
    const float f = float(s);
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    w32(u);
  }
  if (!os) throw FormatError("write failure on " + path);
}

// ---------------------------------------------------------------------------
// Windowed-sinc resampler (Kaiser window, 32 zero crossings each side at the
// output cutoff).

namespace resample_detail {

inline double bessel_i0(double x) {
  // power series; converges quickly for the beta values used here
  double sum = 1.0, term = 1.0;
  for (int k = 1; k < 64; ++k) {
    term *= (x / (2.0 * k)) * (x / (2.0 * k));
    sum += term;
    if (term < 1e-16 * sum) break;
  }
  return sum;
}

inline double sinc(double x) {
  if (std::abs(x) < 1e-12) return 1.0;
  const double px = 3.14159265358979323846 * x;
  return std::sin(px) / px;
}

}  // namespace resample_detail

inline std::vector<double> resample(const std::vector<double>& in, int from_rate,
                                    int to_rate = kSampleRate) {
  if (from_rate <= 0 || to_rate <= 0) throw ContractError("sample rates must be positive");
  if (from_rate == to_rate) return in;
  const double ratio = double(to_rate) / from_rate;
  const double cutoff = std::min(1.0, ratio);   // fraction of input Nyquist
  const double half_width = 32.0 / cutoff;      // in input samples
  const double beta = 8.0;
  const double i0_beta = resample_detail::bessel_i0(beta);
  const std::int64_t out_len = std::int64_t(std::llround(double(in.size()) * ratio));
  std::vector<double> out(size_t(std::max<std::int64_t>(out_len, 1)), 0.0);
  for (std::int64_t n = 0; n < std::int64_t(out.size()); ++n) {
    const double center = double(n) / ratio;
    const std::int64_t lo = std::int64_t(std::ceil(center - half_width));
    const std::int64_t hi = std::int64_t(std::floor(center + half_width));
    double acc = 0.0;
    for (std::int64_t i = std::max<std::int64_t>(lo, 0);
         i <= std::min<std::int64_t>(hi, std::int64_t(in.size()) - 1); ++i) {
      const double d = double(i) - center;
      const double u = d / half_width;
      const double win = resample_detail::bessel_i0(beta * std::sqrt(std::max(0.0, 1.0 - u * u))) /
                         i0_beta;
      acc += in[size_t(i)] * cutoff * resample_detail::sinc(cutoff * d) * win;
    }
    out[size_t(n)] = acc;
  }
  return out;
}

// ---------------------------------------------------------------------------
// 1 s chunking with label inheritance: long clips split into whole chunks
// (trailing partial dropped), sub-second clips tiled to exactly one chunk.

inline std::vector<Example> chunk_clip(const AudioClip& clip) {
  if (clip.samples.empty()) throw ContractError("chunk_clip: empty clip " + clip.source_id);
  std::vector<Example> out;
  const std::int64_t n = std::int64_t(clip.samples.size());
  if (n >= kChunkLen) {
    for (std::int64_t start = 0; start + kChunkLen <= n; start += kChunkLen) {
      Example e;
      e.samples.assign(clip.samples.begin() + start, clip.samples.begin() + start + kChunkLen);
      e.target = clip.labels;
      e.source_id = clip.source_id;
      out.push_back(std::move(e));
    }
  } else {
    Example e;
    e.samples.resize(kChunkLen);
    for (int i = 0; i < kChunkLen; ++i) e.samples[size_t(i)] = clip.samples[size_t(i % n)];
    e.target = clip.labels;
    e.source_id = clip.source_id;
    out.push_back(std::move(e));
  }
  return out;
}

// Non-overlapping rectangular 25 ms framing; row t = samples[400t, 400t+400).
// Row-major [40, 400] output, so this is a pure partition of the input.
inline std::vector<double> frame(const std::vector<double>& samples) {
  if (int(samples.size()) != kChunkLen)
    throw ContractError("frame expects exactly " + std::to_string(kChunkLen) + " samples, got " +
                        std::to_string(samples.size()));
  return samples;
}

// ---------------------------------------------------------------------------
// Manifests.

enum class ManifestFormat { simple, fsd50k };

struct ManifestRow {
  std::string path;
  std::vector<int> label_indices;
  std::string split;  // train | val | eval
};

struct Manifest {
  std::vector<ManifestRow> rows;
  std::vector<std::string> vocab;  // lexicographically sorted
  std::map<std::string, int> label_index;
};

namespace csv_detail {

// One CSV record, double-quote quoting. Returns fields.
inline std::vector<std::string> split_csv_line(const std::string& line, int line_no) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c == '\r') {
      // ignore
    } else {
      cur += c;
    }
  }
  if (quoted)
    throw ParseError("unterminated quote on line " + std::to_string(line_no));
  fields.push_back(cur);
  return fields;
}

inline std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace csv_detail

inline Manifest load_manifest(const std::string& path, ManifestFormat format) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open manifest: " + path);
  std::string line;
  int line_no = 0;
  struct RawRow {
    std::string path;
    std::vector<std::string> labels;
    std::string split;
  };
  std::vector<RawRow> raw;
  bool header_done = false;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto fields = csv_detail::split_csv_line(line, line_no);
    if (!header_done) {
      header_done = true;
      const std::string want = format == ManifestFormat::simple ? "path" : "fname";
      if (fields.empty() || fields[0] != want)
        throw ParseError(path + " line " + std::to_string(line_no) +
                         ": unknown column layout (expected first column '" + want + "')");
      continue;
    }
    RawRow r;
    if (format == ManifestFormat::simple) {
      if (fields.size() != 3)
        throw ParseError(path + " line " + std::to_string(line_no) + ": expected 3 columns");
      r.path = fields[0];
      r.labels = csv_detail::split_on(fields[1], ';');
      r.split = fields[2];
    } else {
      if (fields.size() < 4)
        throw ParseError(path + " line " + std::to_string(line_no) + ": expected 4 columns");
      r.path = fields[0];
      r.labels = csv_detail::split_on(fields[1], ',');
      r.split = fields[3];
    }
    for (auto& l : r.labels)
      if (l.empty())
        throw ParseError(path + " line " + std::to_string(line_no) + ": empty label field");
    raw.push_back(std::move(r));
  }
  Manifest m;
  std::map<std::string, int> vocab_set;
  for (const auto& r : raw)
    for (const auto& l : r.labels) vocab_set.emplace(l, 0);
  for (auto& [name, idx] : vocab_set) {
    idx = int(m.vocab.size());
    m.vocab.push_back(name);
  }
  m.label_index = vocab_set;
  for (const auto& r : raw) {
    ManifestRow row;
    row.path = r.path;
    row.split = r.split;
    for (const auto& l : r.labels) row.label_indices.push_back(vocab_set.at(l));
    std::sort(row.label_indices.begin(), row.label_indices.end());
    row.label_indices.erase(std::unique(row.label_indices.begin(), row.label_indices.end()),
                            row.label_indices.end());
    m.rows.push_back(std::move(row));
  }
  return m;
}

inline std::vector<float> multi_hot(const std::vector<int>& indices, int n_labels) {
  std::vector<float> v(size_t(n_labels), 0.0f);
  for (int i : indices) v[size_t(i)] = 1.0f;
  return v;
}

// ---------------------------------------------------------------------------
// Synthetic 4-class task for desk-scale verification: pure tone, linear
// chirp, white noise, amplitude-modulated tone. Deterministic in the seed.

struct SynthItem {
  AudioClip clip;
  int cls = 0;
  double freq = 0;  // carrier/tone frequency where applicable, else 0
};

inline const std::vector<std::string>& synth_class_names() {
  static const std::vector<std::string> names = {"am_tone", "chirp", "noise", "tone"};
  return names;
}

inline std::vector<SynthItem> synth_dataset(int n_per_class, std::uint64_t seed) {
  if (n_per_class < 1) throw ContractError("synth_dataset needs n_per_class >= 1");
  const double two_pi = 6.283185307179586476925286766559;
  std::vector<SynthItem> out;
  Rng rng(seed);
  // class ids follow the lexicographic order of synth_class_names():
  // 0 am_tone, 1 chirp, 2 noise, 3 tone
  for (int cls = 0; cls < 4; ++cls) {
    for (int i = 0; i < n_per_class; ++i) {
      SynthItem item;
      item.cls = cls;
      item.clip.samples.resize(kChunkLen);
      item.clip.labels = multi_hot({cls}, 4);
      item.clip.source_id =
          synth_class_names()[size_t(cls)] + "_" + std::to_string(i);
      auto& s = item.clip.samples;
      if (cls == 0) {  // amplitude-modulated tone
        const double fc = rng.uniform(200.0, 2000.0);
        const double fm = rng.uniform(4.0, 8.0);
        const double phase = rng.uniform(0.0, two_pi);
        item.freq = fc;
        for (int n = 0; n < kChunkLen; ++n) {
          const double t = double(n) / kSampleRate;
          s[size_t(n)] = 0.25 * (1.0 + std::sin(two_pi * fm * t)) * std::sin(two_pi * fc * t + phase);
        }
      } else if (cls == 1) {  // linear chirp 200 -> 4000 Hz
        const double f0 = 200.0, f1 = 4000.0;
        const double phase = rng.uniform(0.0, two_pi);
        for (int n = 0; n < kChunkLen; ++n) {
          const double t = double(n) / kSampleRate;
          s[size_t(n)] = 0.5 * std::sin(two_pi * (f0 * t + 0.5 * (f1 - f0) * t * t) + phase);
        }
      } else if (cls == 2) {  // white noise
        for (int n = 0; n < kChunkLen; ++n)
          s[size_t(n)] = std::clamp(0.25 * rng.normal(), -1.0, 1.0);
      } else {  // pure tone
        const double f = rng.uniform(200.0, 2000.0);
        const double phase = rng.uniform(0.0, two_pi);
        item.freq = f;
        for (int n = 0; n < kChunkLen; ++n)
          s[size_t(n)] = 0.5 * std::sin(two_pi * f * double(n) / kSampleRate + phase);
      }
      out.push_back(std::move(item));
    }
  }
  return out;
}

}  // namespace audiotf
