#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "audiotf/nn.hpp"

namespace audiotf {

enum class Variant { baseline, pooled, multiscale };

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::baseline: return "baseline";
    case Variant::pooled: return "pooled";
    case Variant::multiscale: return "multiscale";
  }
  return "baseline";
}

inline Variant variant_from_name(const std::string& s) {
  if (s == "baseline") return Variant::baseline;
  if (s == "pooled") return Variant::pooled;
  if (s == "multiscale") return Variant::multiscale;
  throw ConfigError("unknown variant '" + s + "'");
}

struct ModelConfig {
  int num_layers = 6;
  int embed_dim = 64;
  int num_heads = 8;
  int ff_dim = 128;
  int attn_head_dim = 64;  // per-head q/k/v width
  int frontend_hidden = 2048;
  int frame_len = 400;
  int num_frames = 40;
  int head_hidden = 128;
  int head_layers = 3;
  int n_labels = 200;
  Variant variant = Variant::baseline;

  static ModelConfig small(Variant v = Variant::baseline, int labels = 200) {
    ModelConfig c;
    c.num_layers = 3;
    c.frontend_hidden = 1024;
    c.variant = v;
    c.n_labels = labels;
    return c;
  }

  static ModelConfig large(Variant v = Variant::baseline, int labels = 200) {
    ModelConfig c;
    c.variant = v;
    c.n_labels = labels;
    return c;
  }

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v <= 0) throw ConfigError(std::string("config field ") + name + " must be positive");
    };
    positive(num_layers, "num_layers");
    positive(embed_dim, "embed_dim");
    positive(num_heads, "num_heads");
    positive(ff_dim, "ff_dim");
    positive(attn_head_dim, "attn_head_dim");
    positive(frontend_hidden, "frontend_hidden");
    positive(frame_len, "frame_len");
    positive(num_frames, "num_frames");
    positive(head_hidden, "head_hidden");
    positive(head_layers, "head_layers");
    positive(n_labels, "n_labels");
    if (variant == Variant::pooled) {
      int t = num_frames;
      for (int b = 2; b < num_layers; b += 2) {
        if (t % 2 != 0) throw ConfigError("num_frames not divisible by pooling schedule");
        t /= 2;
      }
    }
  }

  // Canonical key=value text, embedded in checkpoints.
  std::string to_text() const {
    std::ostringstream os;
    os << "num_layers=" << num_layers << "\n"
       << "embed_dim=" << embed_dim << "\n"
       << "num_heads=" << num_heads << "\n"
       << "ff_dim=" << ff_dim << "\n"
       << "attn_head_dim=" << attn_head_dim << "\n"
       << "frontend_hidden=" << frontend_hidden << "\n"
       << "frame_len=" << frame_len << "\n"
       << "num_frames=" << num_frames << "\n"
       << "head_hidden=" << head_hidden << "\n"
       << "head_layers=" << head_layers << "\n"
       << "n_labels=" << n_labels << "\n"
       << "variant=" << variant_name(variant) << "\n";
    return os.str();
  }

  static ModelConfig from_text(const std::string& text) {
    ModelConfig c;
    std::istringstream is(text);
    std::string line;
    std::map<std::string, std::string> kv;
    while (std::getline(is, line)) {
      auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto geti = [&](const char* k, int& dst) {
      auto it = kv.find(k);
      if (it == kv.end()) throw CheckpointError(std::string("config missing field ") + k);
      dst = std::stoi(it->second);
    };
    geti("num_layers", c.num_layers);
    geti("embed_dim", c.embed_dim);
    geti("num_heads", c.num_heads);
    geti("ff_dim", c.ff_dim);
    geti("attn_head_dim", c.attn_head_dim);
    geti("frontend_hidden", c.frontend_hidden);
    geti("frame_len", c.frame_len);
    geti("num_frames", c.num_frames);
    geti("head_hidden", c.head_hidden);
    geti("head_layers", c.head_layers);
    geti("n_labels", c.n_labels);
    auto it = kv.find("variant");
    if (it == kv.end()) throw CheckpointError("config missing field variant");
    c.variant = variant_from_name(it->second);
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Front end (dense 400 -> hidden -> E, per frame) + positional encoding +
// transformer stack with the variant's pooling/multi-scale schedule + global
// time average + dense classification head with sigmoid outputs.
template <typename T>
class AudioTransformer {
 public:
  AudioTransformer() = default;

  AudioTransformer(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(seed);
    frontend1_ = DenseLayer<T>(cfg.frame_len, cfg.frontend_hidden, rng);
    frontend2_ = DenseLayer<T>(cfg.frontend_hidden, cfg.embed_dim, rng);
    pe_ = positional_encoding<T>(cfg.num_frames, cfg.embed_dim);
    for (int l = 0; l < cfg.num_layers; ++l)
      blocks_.emplace_back(cfg.embed_dim, cfg.num_heads, cfg.ff_dim, rng, cfg.attn_head_dim);
    int in = cfg.embed_dim;
    for (int l = 0; l < cfg.head_layers - 1; ++l) {
      head_.emplace_back(in, cfg.head_hidden, rng);
      in = cfg.head_hidden;
    }
    head_.emplace_back(in, cfg.n_labels, rng);
    if (cfg.variant == Variant::multiscale)
      ms_spec_ = make_multiscale_spec(cfg.num_frames, cfg.embed_dim);
  }

  const ModelConfig& config() const { return cfg_; }

  // Per-frame embeddings after the block stack (probe mode; no head, no
  // global pooling). Output: [B, T_final, E].
  Tensor<T> forward_embeddings(const Tensor<T>& frames) const {
    check_input(frames);
    const int batch = frames.shape()[0];
    Tensor<T> x = reshape(frames, {batch * cfg_.num_frames, cfg_.frame_len});
    x = frontend2_.forward(relu(frontend1_.forward(x)));
    x = reshape(x, {batch, cfg_.num_frames, cfg_.embed_dim});
    x = add(x, pe_);
    for (int l = 0; l < cfg_.num_layers; ++l) {
      x = blocks_[size_t(l)].forward(x);
      const int done = l + 1;
      if (done % 2 == 0 && done < cfg_.num_layers) {
        if (cfg_.variant == Variant::pooled)
          x = time_average_pool(x, 2, 1);
        else if (cfg_.variant == Variant::multiscale)
          x = multi_scale_layer(x, ms_spec_);
      }
    }
    return x;
  }

  // frames: [B, num_frames, frame_len] -> scores [B, n_labels] in (0, 1).
  Tensor<T> forward(const Tensor<T>& frames) const {
    Tensor<T> x = reduce_mean(forward_embeddings(frames), 1);
    for (size_t l = 0; l + 1 < head_.size(); ++l) x = relu(head_[l].forward(x));
    return sigmoid(head_.back().forward(x));
  }

  NamedParams<T> parameters() const {
    NamedParams<T> out;
    frontend1_.collect("frontend1", out);
    frontend2_.collect("frontend2", out);
    for (size_t l = 0; l < blocks_.size(); ++l)
      blocks_[l].collect("block" + std::to_string(l), out);
    for (size_t l = 0; l < head_.size(); ++l)
      head_[l].collect("head" + std::to_string(l), out);
    return out;
  }

  std::int64_t param_count() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : parameters()) n += t.size();
    return n;
  }

  void zero_grads() const {
    for (auto& [name, t] : parameters()) const_cast<Tensor<T>&>(t).zero_grad();
  }

  const DenseLayer<T>& frontend_first_layer() const { return frontend1_; }
  const std::vector<TransformerBlock<T>>& blocks() const { return blocks_; }

 private:
  void check_input(const Tensor<T>& frames) const {
    if (frames.rank() != 3 || frames.shape()[1] != cfg_.num_frames ||
        frames.shape()[2] != cfg_.frame_len)
      throw DimensionError("expected frames [B," + std::to_string(cfg_.num_frames) + "," +
                           std::to_string(cfg_.frame_len) + "], got " + shape_str(frames.shape()));
  }

  ModelConfig cfg_;
  DenseLayer<T> frontend1_, frontend2_;
  Tensor<T> pe_;
  std::vector<TransformerBlock<T>> blocks_;
  std::vector<DenseLayer<T>> head_;
  MultiScaleSpec ms_spec_;
};

// ---------------------------------------------------------------------------
// Checkpoint format: magic "ATFM", u32 version, length-prefixed config text,
// then per-parameter records (u32 name length, name bytes, u32 rank, u32
// dims, little-endian float32 values).

inline constexpr char kCheckpointMagic[4] = {'A', 'T', 'F', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {(unsigned char)(v & 0xff), (unsigned char)((v >> 8) & 0xff),
                        (unsigned char)((v >> 16) & 0xff), (unsigned char)((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw CheckpointError("truncated checkpoint while reading u32");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

inline void write_f32(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  write_u32(os, bits);
}

inline float read_f32(std::istream& is) {
  std::uint32_t bits = read_u32(is);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const AudioTransformer<T>& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open checkpoint for writing: " + path);
  os.write(kCheckpointMagic, 4);
  detail::write_u32(os, kCheckpointVersion);
  const std::string cfg = model.config().to_text();
  detail::write_u32(os, std::uint32_t(cfg.size()));
  os.write(cfg.data(), std::streamsize(cfg.size()));
  for (const auto& [name, t] : model.parameters()) {
    detail::write_u32(os, std::uint32_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    detail::write_u32(os, std::uint32_t(t.shape().size()));
    for (int d : t.shape()) detail::write_u32(os, std::uint32_t(d));
    for (const T v : t.values()) detail::write_f32(os, float(v));
  }
  if (!os) throw CheckpointError("write failure on checkpoint: " + path);
}

template <typename T>
AudioTransformer<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw CheckpointError("bad checkpoint magic in " + path);
  const std::uint32_t version = detail::read_u32(is);
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t cfg_len = detail::read_u32(is);
  std::string cfg_text(cfg_len, '\0');
  if (!is.read(cfg_text.data(), cfg_len)) throw CheckpointError("truncated config block");
  const ModelConfig cfg = ModelConfig::from_text(cfg_text);
  AudioTransformer<T> model(cfg, /*seed=*/0);
  auto params = model.parameters();
  std::map<std::string, Tensor<T>> by_name(params.begin(), params.end());
  std::map<std::string, bool> filled;
  for (auto& [name, t] : by_name) filled[name] = false;
  while (is.peek() != std::ifstream::traits_type::eof()) {
    const std::uint32_t name_len = detail::read_u32(is);
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw CheckpointError("truncated parameter name");
    const std::uint32_t rank = detail::read_u32(is);
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(int(detail::read_u32(is)));
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("unknown parameter '" + name + "' in " + path);
    if (it->second.shape() != shape)
      throw CheckpointError("shape mismatch for '" + name + "': file " + shape_str(shape) +
                            " vs config " + shape_str(it->second.shape()));
    auto& vals = it->second.values();
    for (auto& v : vals) v = T(detail::read_f32(is));
    filled[name] = true;
  }
  for (const auto& [name, ok] : filled)
    if (!ok) throw CheckpointError("checkpoint missing parameter '" + name + "'");
  return model;
}

// Load against a caller-requested config; any mismatch rejects the whole
// file before parameters are touched.
template <typename T>
AudioTransformer<T> load_checkpoint(const std::string& path, const ModelConfig& expected) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw CheckpointError("bad checkpoint magic in " + path);
  detail::read_u32(is);
  const std::uint32_t cfg_len = detail::read_u32(is);
  std::string cfg_text(cfg_len, '\0');
  if (!is.read(cfg_text.data(), cfg_len)) throw CheckpointError("truncated config block");
  if (ModelConfig::from_text(cfg_text).to_text() != expected.to_text())
    throw CheckpointError("checkpoint config in " + path + " does not match the requested config");
  return load_checkpoint<T>(path);
}

}  // namespace audiotf
