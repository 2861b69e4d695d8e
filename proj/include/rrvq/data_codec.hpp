#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "rrvq/image.hpp"
#include "rrvq/model.hpp"
#include "rrvq/random.hpp"
#include "rrvq/training.hpp"

namespace rrvq {

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(what) {}
};

// ---------------------------------------------------------------------------
// Swatch dataset
// ---------------------------------------------------------------------------

/// The nine swatch colours: the RGB cube corners plus mid grey.
inline const std::array<std::array<std::uint8_t, 3>, 9>& swatch_palette() {
  static const std::array<std::array<std::uint8_t, 3>, 9> p = {{{0, 0, 0},
                                                                {255, 0, 0},
                                                                {0, 255, 0},
                                                                {0, 0, 255},
                                                                {255, 255, 0},
                                                                {255, 0, 255},
                                                                {0, 255, 255},
                                                                {255, 255, 255},
                                                                {128, 128, 128}}};
  return p;
}

/// Images that are uniform blocks of one palette colour each.
inline std::vector<Image> gen_swatches(int n, int side, Rng& rng) {
  if (n < 1) throw Error("gen_swatches: n must be >= 1");
  std::vector<Image> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    const auto& colour = swatch_palette()[rng.uniform_int(9)];
    Image img;
    img.channels = 3;
    img.side = side;
    img.levels.resize(static_cast<std::size_t>(3) * side * side);
    for (int c = 0; c < 3; ++c)
      std::fill_n(img.levels.begin() + c * side * side, side * side, colour[c]);
    out.push_back(std::move(img));
  }
  return out;
}

// ---------------------------------------------------------------------------
// PPM (P6, maxval 255)
// ---------------------------------------------------------------------------

namespace detail_ppm {

inline int read_ppm_int(std::istream& in) {
  // skips whitespace and '#' comments
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (std::isspace(c)) {
      c = in.get();
    } else {
      break;
    }
  }
  if (c == EOF || !std::isdigit(c)) throw IoError("ppm: malformed header");
  int v = 0;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    c = in.get();
  }
  if (c == EOF) throw IoError("ppm: truncated header");
  return v;
}

}  // namespace detail_ppm

inline Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  char m0 = static_cast<char>(f.get());
  char m1 = static_cast<char>(f.get());
  if (m0 != 'P' || m1 != '6') throw IoError("ppm: not a P6 file: " + path);
  int width = detail_ppm::read_ppm_int(f);
  int height = detail_ppm::read_ppm_int(f);
  int maxval = detail_ppm::read_ppm_int(f);
  if (maxval != 255) throw IoError("ppm: unsupported maxval " + std::to_string(maxval));
  if (width != height) throw IoError("ppm: only square images are supported");
  std::vector<char> raw(static_cast<std::size_t>(width) * height * 3);
  f.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (f.gcount() != static_cast<std::streamsize>(raw.size())) throw IoError("ppm: truncated pixel data");

  Image img;
  img.channels = 3;
  img.side = width;
  img.levels.resize(raw.size());
  // interleaved RGB -> channel-major
  std::size_t pixels = static_cast<std::size_t>(width) * height;
  for (std::size_t p = 0; p < pixels; ++p)
    for (int c = 0; c < 3; ++c)
      img.levels[c * pixels + p] = static_cast<std::uint8_t>(raw[p * 3 + c]);
  return img;
}

inline void write_ppm(const std::string& path, const Image& img) {
  if (img.channels != 3) throw IoError("ppm: need a 3-channel image");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << "P6\n" << img.side << " " << img.side << "\n255\n";
  std::size_t pixels = static_cast<std::size_t>(img.side) * img.side;
  std::vector<char> raw(pixels * 3);
  for (std::size_t p = 0; p < pixels; ++p)
    for (int c = 0; c < 3; ++c) raw[p * 3 + c] = static_cast<char>(img.levels[c * pixels + p]);
  f.write(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!f) throw IoError("failed writing " + path);
}

/// Tiles images row-major into a square sheet, for sample grids.
inline Image tile_images(const std::vector<Image>& images, int per_row) {
  if (images.empty()) throw Error("tile_images: no images");
  int side = images[0].side;
  int rows = (static_cast<int>(images.size()) + per_row - 1) / per_row;
  Image out;
  out.channels = 3;
  int grid = std::max(per_row, rows);
  out.side = grid * side;
  out.levels.assign(static_cast<std::size_t>(3) * out.side * out.side, 0);
  std::size_t opix = static_cast<std::size_t>(out.side) * out.side;
  std::size_t ipix = static_cast<std::size_t>(side) * side;
  for (std::size_t i = 0; i < images.size(); ++i) {
    int r = static_cast<int>(i) / per_row, c = static_cast<int>(i) % per_row;
    for (int ch = 0; ch < 3; ++ch)
      for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
          out.levels[ch * opix + (r * side + y) * out.side + (c * side + x)] =
              images[i].levels[ch * ipix + y * side + x];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Latent bitstream
// ---------------------------------------------------------------------------

inline int bits_for(int K) {
  int b = 0;
  while ((1 << b) < K) ++b;
  return b;  // ceil(log2 K); 0 when K == 1
}

struct BitstreamLayer {
  std::uint16_t grid_side = 0;
  std::uint16_t K = 0;
};

/// Packed hard latent indices with a self-describing header. The payload
/// packs ceil(log2 K) bits per index MSB-first, top layer first, zero-padded
/// to a byte boundary.
struct LatentBitstream {
  std::uint16_t image_side = 0;
  std::vector<BitstreamLayer> layers;  // [0] = bottom, matching the model
  std::vector<std::uint8_t> payload;

  std::size_t payload_bits() const {
    std::size_t bits = 0;
    for (const auto& l : layers)
      bits += static_cast<std::size_t>(l.grid_side) * l.grid_side * bits_for(l.K);
    return bits;
  }
};

inline std::size_t bitstream_bits(const ModelConfig& cfg) {
  std::size_t bits = 0;
  for (const auto& l : cfg.layers)
    bits += static_cast<std::size_t>(l.grid_side) * l.grid_side * bits_for(l.K);
  return bits;
}

namespace detail_bits {

struct BitWriter {
  std::vector<std::uint8_t> bytes;
  int used = 0;  // bits used in the last byte

  void push(std::uint32_t value, int width) {
    for (int b = width - 1; b >= 0; --b) {
      if (used == 0) bytes.push_back(0);
      int bit = (value >> b) & 1;
      bytes.back() |= static_cast<std::uint8_t>(bit << (7 - used));
      used = (used + 1) % 8;
    }
  }
};

struct BitReader {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;  // bit position

  explicit BitReader(const std::vector<std::uint8_t>& b) : bytes(b) {}

  std::uint32_t pull(int width) {
    std::uint32_t v = 0;
    for (int b = 0; b < width; ++b) {
      std::size_t byte = pos / 8;
      if (byte >= bytes.size()) throw IoError("bitstream: payload exhausted");
      int bit = (bytes[byte] >> (7 - pos % 8)) & 1;
      v = (v << 1) | static_cast<std::uint32_t>(bit);
      ++pos;
    }
    return v;
  }
};

}  // namespace detail_bits

/// indices[l] are the hard indices of layer l (bottom first, row-major).
inline LatentBitstream pack_indices(const ModelConfig& cfg,
                                    const std::vector<std::vector<int>>& indices) {
  if (indices.size() != cfg.layers.size())
    throw Error("pack_indices: expected " + std::to_string(cfg.layers.size()) + " layers");
  LatentBitstream bs;
  bs.image_side = static_cast<std::uint16_t>(cfg.image_side);
  for (const auto& l : cfg.layers)
    bs.layers.push_back({static_cast<std::uint16_t>(l.grid_side), static_cast<std::uint16_t>(l.K)});
  detail_bits::BitWriter w;
  for (int l = cfg.num_layers() - 1; l >= 0; --l) {  // top layer first
    int width = bits_for(cfg.layers[l].K);
    if (static_cast<int>(indices[l].size()) != cfg.latents_at(l))
      throw Error("pack_indices: layer " + std::to_string(l) + " has wrong index count");
    for (int idx : indices[l]) {
      if (idx < 0 || idx >= cfg.layers[l].K) throw Error("pack_indices: index out of range");
      w.push(static_cast<std::uint32_t>(idx), width);
    }
  }
  bs.payload = std::move(w.bytes);
  return bs;
}

inline std::vector<std::vector<int>> unpack_indices(const LatentBitstream& bs) {
  std::size_t expect_bytes = (bs.payload_bits() + 7) / 8;
  if (bs.payload.size() != expect_bytes)
    throw IoError("bitstream: payload holds " + std::to_string(bs.payload.size()) +
                  " bytes, header implies " + std::to_string(expect_bytes));
  detail_bits::BitReader r(bs.payload);
  int L = static_cast<int>(bs.layers.size());
  std::vector<std::vector<int>> indices(L);
  for (int l = L - 1; l >= 0; --l) {
    int m = bs.layers[l].grid_side * bs.layers[l].grid_side;
    int width = bits_for(bs.layers[l].K);
    indices[l].resize(m);
    for (int i = 0; i < m; ++i) {
      int v = static_cast<int>(r.pull(width));
      if (v >= bs.layers[l].K) throw IoError("bitstream: index exceeds codebook size");
      indices[l][i] = v;
    }
  }
  return indices;
}

namespace detail_bits {

constexpr char kMagic[4] = {'R', 'R', 'V', 'B'};
constexpr std::uint32_t kVersion = 1;

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline std::uint16_t get_u16(const std::string& in, std::size_t& pos) {
  if (pos + 2 > in.size()) throw IoError("bitstream truncated");
  std::uint16_t v = static_cast<std::uint16_t>(static_cast<unsigned char>(in[pos]) |
                                               (static_cast<unsigned char>(in[pos + 1]) << 8));
  pos += 2;
  return v;
}

}  // namespace detail_bits

inline std::string encode_bitstream(const LatentBitstream& bs) {
  std::string out;
  out.append(detail_bits::kMagic, 4);
  detail_ckpt::put_u32(out, detail_bits::kVersion);
  detail_bits::put_u16(out, bs.image_side);
  out.push_back(static_cast<char>(bs.layers.size()));
  for (const auto& l : bs.layers) {
    detail_bits::put_u16(out, l.grid_side);
    detail_bits::put_u16(out, l.K);
  }
  out.append(reinterpret_cast<const char*>(bs.payload.data()), bs.payload.size());
  return out;
}

inline LatentBitstream decode_bitstream(const std::string& in) {
  std::size_t pos = 0;
  if (in.size() < 4 || std::memcmp(in.data(), detail_bits::kMagic, 4) != 0)
    throw IoError("bitstream: bad magic");
  pos = 4;
  std::uint32_t version = detail_ckpt::get_u32(in, pos);
  if (version != detail_bits::kVersion)
    throw IoError("bitstream: unsupported version " + std::to_string(version));
  LatentBitstream bs;
  bs.image_side = detail_bits::get_u16(in, pos);
  if (pos + 1 > in.size()) throw IoError("bitstream truncated");
  int L = static_cast<unsigned char>(in[pos++]);
  if (L < 1) throw IoError("bitstream: no layers");
  for (int l = 0; l < L; ++l) {
    BitstreamLayer layer;
    layer.grid_side = detail_bits::get_u16(in, pos);
    layer.K = detail_bits::get_u16(in, pos);
    if (layer.grid_side == 0 || layer.K == 0) throw IoError("bitstream: corrupt layer header");
    bs.layers.push_back(layer);
  }
  std::size_t expect = (bs.payload_bits() + 7) / 8;
  if (in.size() - pos != expect)
    throw IoError("bitstream: payload length " + std::to_string(in.size() - pos) +
                  " does not match header (expected " + std::to_string(expect) + ")");
  bs.payload.assign(in.begin() + static_cast<std::ptrdiff_t>(pos), in.end());
  return bs;
}

inline void write_bitstream(const std::string& path, const LatentBitstream& bs) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  std::string bytes = encode_bitstream(bs);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing " + path);
}

inline LatentBitstream read_bitstream(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_bitstream(bytes);
}

// ---------------------------------------------------------------------------
// Compression codec
// ---------------------------------------------------------------------------

/// Fixed-rate encoding: posterior modes, top-down, each layer conditioned on
/// the hard choices above it.
inline LatentBitstream compress(const Model& m, const Image& img) {
  if (!m.discrete()) throw Error("compress: requires a discrete-latent model");
  if (img.side != m.cfg.image_side)
    throw Error("compress: image side " + std::to_string(img.side) + " does not match model side " +
                std::to_string(m.cfg.image_side));
  Rng unused(0);
  PosteriorResult post = posterior_pass(m, ImageBatch::of({img}), PassMode::ModeArgmax, 1.0, unused);
  std::vector<std::vector<int>> indices;
  for (const auto& l : post.layers) indices.push_back(l.latent.indices);
  return pack_indices(m.cfg, indices);
}

inline void check_bitstream_matches(const Model& m, const LatentBitstream& bs) {
  if (bs.image_side != m.cfg.image_side ||
      static_cast<int>(bs.layers.size()) != m.cfg.num_layers())
    throw IoError("bitstream header does not match the model configuration");
  for (int l = 0; l < m.cfg.num_layers(); ++l)
    if (bs.layers[l].grid_side != m.cfg.layers[l].grid_side || bs.layers[l].K != m.cfg.layers[l].K)
      throw IoError("bitstream layer " + std::to_string(l) + " (grid " +
                    std::to_string(bs.layers[l].grid_side) + ", K " +
                    std::to_string(bs.layers[l].K) + ") does not match the model");
}

/// Deterministic decode: the unpacked indices drive the generative pass and
/// the likelihood mean is quantized back to 8-bit levels.
inline Image decompress(const Model& m, const LatentBitstream& bs) {
  if (!m.discrete()) throw Error("decompress: requires a discrete-latent model");
  check_bitstream_matches(m, bs);
  auto indices = unpack_indices(bs);
  std::vector<LayerLatent> latents(m.layers());
  for (int l = 0; l < m.layers(); ++l) {
    latents[l].indices = indices[l];
    latents[l].weights = one_hot_rows(indices[l], m.cats(l));
  }
  GenerativeResult gen = generative_pass(m, latents, 1);
  return image_from_unit(likelihood_mean_unit(m, gen.like), m.cfg.image_channels, m.cfg.image_side);
}

struct RateRow {
  std::string name;
  std::size_t bits = 0;
  double compression_ratio = 0.0;
};

/// CR = raw bits / coded bits; the coded size is a pure function of the
/// model configuration.
inline std::vector<RateRow> rate_report(const Model& m, const std::vector<Image>& images,
                                        const std::vector<std::string>& names = {}) {
  std::vector<RateRow> rows;
  double raw_bits = static_cast<double>(m.cfg.subpixels()) * 8.0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    LatentBitstream bs = compress(m, images[i]);
    RateRow r;
    r.name = i < names.size() ? names[i] : "image_" + std::to_string(i);
    r.bits = bs.payload_bits();
    r.compression_ratio = raw_bits / static_cast<double>(r.bits);
    rows.push_back(std::move(r));
  }
  return rows;
}

inline void write_rate_csv(const std::string& path, const std::vector<RateRow>& rows) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << "image,bits,compression_ratio\n";
  for (const auto& r : rows) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.6f", r.compression_ratio);
    f << r.name << ',' << r.bits << ',' << buf << '\n';
  }
}

}  // namespace rrvq
