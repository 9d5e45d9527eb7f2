// SPDX-License-Identifier: Apache-2.0
#include "smp/mask_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>

#include "smp/error.hpp"
#include "smp/hash.hpp"
#include "smp/random.hpp"

namespace smp {

namespace {

// ---------------------------------------------------------------------------
// Little-endian byte codec

class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void raw(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }
  void name(const std::string& s) {
    if (s.size() > 0xFFFF) fail(ErrorKind::Contract, "name longer than 65535 bytes");
    u16(static_cast<std::uint16_t>(s.size()));
    out_.insert(out_.end(), s.begin(), s.end());
  }
  Bytes take() { return std::move(out_); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  Bytes out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::span<const std::uint8_t> raw(std::size_t n) {
    need(n);
    auto out = data_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  std::string name() {
    const std::size_t n = u16();
    auto b = raw(n);
    return {b.begin(), b.end()};
  }
  std::span<const std::uint8_t> rest() const { return data_.subspan(pos_); }
  void skip(std::size_t n) { raw(n); }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) fail(ErrorKind::Truncated, "unexpected end of data at byte " + std::to_string(pos_));
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

void write_leb128(Bytes& out, std::uint64_t v) {
  do {
    std::uint8_t byte = v & 0x7F;
    v >>= 7;
    if (v) byte |= 0x80;
    out.push_back(byte);
  } while (v);
}

void check_binary(const MaskRecord& r) {
  if (r.bits.size() != static_cast<std::size_t>(r.rows) * r.cols) {
    fail(ErrorKind::Shape, "mask '" + r.name + "' has " + std::to_string(r.bits.size()) + " entries for " +
                               std::to_string(r.rows) + "x" + std::to_string(r.cols));
  }
  for (auto b : r.bits)
    if (b > 1) fail(ErrorKind::Domain, "mask '" + r.name + "' is not binary");
}

void write_config(ByteWriter& w, const ModelConfig& c) {
  for (std::size_t v : {c.num_layers, c.hidden_dim, c.num_heads, c.ffn_dim, c.vocab_size, c.max_seq_len, c.num_labels})
    w.u32(static_cast<std::uint32_t>(v));
}

ModelConfig read_config(ByteReader& r) {
  ModelConfig c;
  c.num_layers = r.u32();
  c.hidden_dim = r.u32();
  c.num_heads = r.u32();
  c.ffn_dim = r.u32();
  c.vocab_size = r.u32();
  c.max_seq_len = r.u32();
  c.num_labels = r.u32();
  return c;
}

void check_magic(ByteReader& r, const std::array<std::uint8_t, 4>& magic, std::string_view what) {
  auto m = r.raw(4);
  if (!std::equal(m.begin(), m.end(), magic.begin())) fail(ErrorKind::BadMagic, std::string(what) + ": bad magic bytes");
  const auto version = r.u16();
  if (version != kFormatVersion) {
    fail(ErrorKind::BadVersion, std::string(what) + ": unsupported version " + std::to_string(version));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Fingerprint

Bytes canonical_encoding(const ModelConfig& config) {
  ByteWriter w;
  write_config(w, config);
  return w.take();
}

std::uint64_t config_fingerprint(const ModelConfig& config) {
  Fnv1a h;
  h.bytes(canonical_encoding(config));
  return h.digest();
}

// ---------------------------------------------------------------------------
// Artifacts

MaskArtifact make_artifact(const EncoderModel& model, bool compressed) {
  MaskArtifact a;
  a.fingerprint = config_fingerprint(model.config);
  a.compressed = compressed;
  for (const MaskedLinear* lin : model.prunable()) {
    a.records.push_back({lin->name, static_cast<std::uint32_t>(lin->rows()), static_cast<std::uint32_t>(lin->cols()),
                         lin->mask});
  }
  return a;
}

void apply_artifact(EncoderModel& model, const MaskArtifact& artifact) {
  if (artifact.fingerprint != config_fingerprint(model.config)) {
    fail(ErrorKind::FingerprintMismatch, "mask artifact was not produced for this model configuration");
  }
  std::map<std::string, const MaskRecord*> by_name;
  for (const auto& r : artifact.records) by_name[r.name] = &r;
  for (MaskedLinear* lin : model.prunable()) {
    auto it = by_name.find(lin->name);
    if (it == by_name.end()) fail(ErrorKind::Shape, "mask artifact lacks matrix '" + lin->name + "'");
    const MaskRecord& r = *it->second;
    if (r.rows != lin->rows() || r.cols != lin->cols()) {
      fail(ErrorKind::Shape, "mask '" + r.name + "' shape does not match the model");
    }
    check_binary(r);
    lin->mask = r.bits;
  }
}

Bytes pack_bits(std::span<const std::uint8_t> bits) {
  Bytes out((bits.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < bits.size(); ++i)
    if (bits[i]) out[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  return out;
}

Mask unpack_bits(std::span<const std::uint8_t> bytes, std::size_t bit_count) {
  if (bytes.size() != (bit_count + 7) / 8) fail(ErrorKind::Truncated, "bit payload has the wrong length");
  Mask out(bit_count);
  for (std::size_t i = 0; i < bit_count; ++i) out[i] = (bytes[i / 8] >> (i % 8)) & 1u;
  for (std::size_t i = bit_count; i < bytes.size() * 8; ++i)
    if ((bytes[i / 8] >> (i % 8)) & 1u) fail(ErrorKind::Corrupt, "non-zero padding bits");
  return out;
}

Bytes rle_encode(std::span<const std::uint8_t> bits) {
  Bytes out;
  std::uint8_t current = 0;
  std::uint64_t run = 0;
  for (std::uint8_t b : bits) {
    if (b == current) {
      ++run;
      continue;
    }
    write_leb128(out, run);
    current = b;
    run = 1;
  }
  if (!bits.empty()) write_leb128(out, run);
  return out;
}

Mask rle_decode(std::span<const std::uint8_t> bytes, std::size_t bit_count, std::size_t* consumed) {
  Mask out;
  out.reserve(bit_count);
  std::size_t pos = 0;
  std::uint8_t current = 0;
  bool first = true;
  while (out.size() < bit_count) {
    std::uint64_t run = 0;
    int shift = 0;
    for (;;) {
      if (pos >= bytes.size()) fail(ErrorKind::Truncated, "run-length block ends early");
      if (shift > 63) fail(ErrorKind::Corrupt, "run-length value overflows 64 bits");
      const std::uint8_t byte = bytes[pos++];
      run |= static_cast<std::uint64_t>(byte & 0x7F) << shift;
      shift += 7;
      if (!(byte & 0x80)) break;
    }
    if (run == 0 && !first) fail(ErrorKind::Corrupt, "empty run after the first");
    if (run > bit_count - out.size()) fail(ErrorKind::Corrupt, "run exceeds the declared bit count");
    out.insert(out.end(), run, current);
    current ^= 1;
    first = false;
  }
  if (consumed) *consumed = pos;
  return out;
}

std::size_t uncompressed_size(const MaskArtifact& artifact) {
  std::size_t n = kMaskHeaderSize;
  for (const auto& r : artifact.records) n += 10 + r.name.size() + (static_cast<std::size_t>(r.rows) * r.cols + 7) / 8;
  return n;
}

Bytes serialize(const MaskArtifact& artifact) {
  ByteWriter w;
  w.raw(kMaskMagic);
  w.u16(kFormatVersion);
  w.u8(artifact.compressed ? kFlagCompressed : 0);
  w.u64(artifact.fingerprint);
  w.u32(static_cast<std::uint32_t>(artifact.records.size()));
  Mask stream;
  for (const auto& r : artifact.records) {
    check_binary(r);
    w.name(r.name);
    w.u32(r.rows);
    w.u32(r.cols);
    if (artifact.compressed) {
      stream.insert(stream.end(), r.bits.begin(), r.bits.end());
    } else {
      w.raw(pack_bits(r.bits));
    }
  }
  if (artifact.compressed) w.raw(rle_encode(stream));
  return w.take();
}

MaskArtifact deserialize_unchecked(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  check_magic(r, kMaskMagic, "mask artifact");
  MaskArtifact a;
  const auto flags = r.u8();
  if (flags & ~kFlagCompressed) fail(ErrorKind::Corrupt, "mask artifact: unknown flag bits");
  a.compressed = flags & kFlagCompressed;
  a.fingerprint = r.u64();
  const std::uint32_t count = r.u32();
  std::size_t total_bits = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    MaskRecord rec;
    rec.name = r.name();
    rec.rows = r.u32();
    rec.cols = r.u32();
    const std::size_t n = static_cast<std::size_t>(rec.rows) * rec.cols;
    if (!a.compressed) rec.bits = unpack_bits(r.raw((n + 7) / 8), n);
    total_bits += n;
    a.records.push_back(std::move(rec));
  }
  if (a.compressed) {
    std::size_t used = 0;
    const Mask stream = rle_decode(r.rest(), total_bits, &used);
    r.skip(used);
    std::size_t off = 0;
    for (auto& rec : a.records) {
      const std::size_t n = static_cast<std::size_t>(rec.rows) * rec.cols;
      rec.bits.assign(stream.begin() + static_cast<std::ptrdiff_t>(off),
                      stream.begin() + static_cast<std::ptrdiff_t>(off + n));
      off += n;
    }
  }
  if (!r.done()) fail(ErrorKind::Corrupt, "mask artifact: trailing bytes");
  return a;
}

MaskArtifact deserialize(std::span<const std::uint8_t> bytes, const ModelConfig& config) {
  // Header fields are checked in order: magic, version, fingerprint.
  ByteReader header(bytes);
  check_magic(header, kMaskMagic, "mask artifact");
  header.u8();
  if (header.u64() != config_fingerprint(config)) {
    fail(ErrorKind::FingerprintMismatch, "mask artifact was produced for a different model configuration");
  }
  return deserialize_unchecked(bytes);
}

// ---------------------------------------------------------------------------
// Files

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open '" + path.string() + "' for reading");
  Bytes out((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) fail(ErrorKind::Io, "failed reading '" + path.string() + "'");
  return out;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot open '" + tmp.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::Io, "failed writing '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::Io, "cannot move '" + tmp.string() + "' into place: " + ec.message());
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

struct StoredTensor {
  Shape shape;
  std::vector<double> values;
};

void write_tensor(ByteWriter& w, const std::string& name, const Shape& shape, std::span<const double> values) {
  w.name(name);
  w.u8(static_cast<std::uint8_t>(shape.size()));
  for (auto e : shape) w.u32(static_cast<std::uint32_t>(e));
  for (double v : values) w.f64(v);
}

void write_matrix(ByteWriter& w, const std::string& name, const DenseMatrix& m) {
  write_tensor(w, name, {m.rows, m.cols}, m.values);
}

void write_vector(ByteWriter& w, const std::string& name, const std::vector<double>& v) {
  write_tensor(w, name, {v.size()}, v);
}

void write_checkpoint_header(ByteWriter& w, const ModelConfig& config, const std::vector<std::uint32_t>& label_ids,
                             std::size_t tensor_count) {
  w.raw(kCheckpointMagic);
  w.u16(kFormatVersion);
  w.u64(config_fingerprint(config));
  write_config(w, config);
  w.u32(static_cast<std::uint32_t>(label_ids.size()));
  for (auto id : label_ids) w.u32(id);
  w.u32(static_cast<std::uint32_t>(tensor_count));
}

struct CheckpointContents {
  ModelConfig config;
  std::vector<std::uint32_t> label_ids;
  std::map<std::string, StoredTensor> tensors;
};

CheckpointContents read_checkpoint_body(ByteReader& r) {
  check_magic(r, kCheckpointMagic, "checkpoint");
  CheckpointContents c;
  const std::uint64_t fingerprint = r.u64();
  c.config = read_config(r);
  if (fingerprint != config_fingerprint(c.config)) fail(ErrorKind::Corrupt, "checkpoint: header fingerprint disagrees");
  const std::uint32_t labels = r.u32();
  for (std::uint32_t i = 0; i < labels; ++i) c.label_ids.push_back(r.u32());
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.name();
    StoredTensor t;
    const std::uint8_t rank = r.u8();
    for (std::uint8_t k = 0; k < rank; ++k) t.shape.push_back(r.u32());
    const std::size_t n = shape_numel(t.shape);
    if (n > r.rest().size() / 8) fail(ErrorKind::Truncated, "checkpoint: tensor '" + name + "' payload");
    t.values.resize(n);
    for (auto& v : t.values) v = r.f64();
    c.tensors.emplace(std::move(name), std::move(t));
  }
  return c;
}

const StoredTensor& find_tensor(const CheckpointContents& c, const std::string& name) {
  auto it = c.tensors.find(name);
  if (it == c.tensors.end()) fail(ErrorKind::Corrupt, "checkpoint: missing tensor '" + name + "'");
  return it->second;
}

void load_into(Tensor& dst, const CheckpointContents& c, const std::string& name) {
  const auto& src = find_tensor(c, name);
  if (src.shape != dst.shape()) fail(ErrorKind::Corrupt, "checkpoint: tensor '" + name + "' has the wrong shape");
  std::copy(src.values.begin(), src.values.end(), dst.mutable_data().begin());
}

}  // namespace

Bytes save_checkpoint(const EncoderModel& model) {
  ByteWriter w;
  const auto params = model.named_parameters();
  write_checkpoint_header(w, model.config, model.head.label_token_ids, params.size());
  for (const auto& [name, t] : params) write_tensor(w, name, t.shape(), t.data());
  return w.take();
}

EncoderModel load_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const CheckpointContents c = read_checkpoint_body(r);
  if (!r.done()) fail(ErrorKind::Corrupt, "checkpoint: trailing bytes");
  c.config.validate();
  EncoderModel model = build_model(c.config, 0);
  for (auto& [name, t] : model.named_parameters()) {
    if (name == "head.label_embeddings") continue;
    Tensor target = t;
    load_into(target, c, name);
  }
  init_head_from_label_words(model, c.label_ids);
  Tensor head = model.head.label_embeddings;
  load_into(head, c, "head.label_embeddings");
  return model;
}

std::uint64_t checkpoint_fingerprint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  check_magic(r, kCheckpointMagic, "checkpoint");
  return r.u64();
}

// ---------------------------------------------------------------------------
// Compaction

namespace {

constexpr double kLayerNormEps = 1e-5;

double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)));
}

DenseMatrix to_dense(const Tensor& t) {
  return {t.shape()[0], t.shape().size() > 1 ? t.shape()[1] : 1, {t.data().begin(), t.data().end()}};
}

std::vector<double> to_vector(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// out (n × rows) = x (n × cols) · Mᵀ + b
std::vector<double> affine(const std::vector<double>& x, std::size_t n, const DenseMatrix& m,
                           const std::vector<double>& b) {
  std::vector<double> out(n * m.rows);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m.rows; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < m.cols; ++p) acc += x[i * m.cols + p] * m.values[j * m.cols + p];
      out[i * m.rows + j] = acc + b[j];
    }
  return out;
}

void layer_norm_rows(std::vector<double>& x, std::size_t d, const std::vector<double>& g, const std::vector<double>& b) {
  for (std::size_t i = 0; i < x.size() / d; ++i) {
    double* row = x.data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < d; ++j) row[j] = g[j] * (row[j] - mu) * inv + b[j];
  }
}

std::size_t matrix_params(const DenseMatrix& m, const std::vector<double>& b) { return m.rows * m.cols + b.size(); }

}  // namespace

std::size_t CompactedModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) {
    n += matrix_params(l.q, l.bq) + matrix_params(l.k, l.bk) + matrix_params(l.v, l.bv) + matrix_params(l.o, l.bo) +
         matrix_params(l.u, l.bu) + matrix_params(l.d, l.bd);
  }
  return n;
}

std::size_t prunable_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.hidden_dim, f = c.ffn_dim;
  return c.num_layers * (4 * (d * d + d) + (f * d + f) + (d * f + d));
}

std::vector<double> CompactedModel::forward(std::span<const std::uint32_t> ids) const {
  const std::size_t d = config.hidden_dim, dh = config.head_dim(), n = ids.size();
  if (n == 0 || n > config.max_seq_len || ids[0] != kClsTokenId) fail(ErrorKind::Domain, "compacted forward: bad sequence");
  std::vector<double> x(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    if (ids[i] >= config.vocab_size) fail(ErrorKind::Domain, "compacted forward: token out of range");
    for (std::size_t j = 0; j < d; ++j)
      x[i * d + j] = token_embedding.at(ids[i], j) + position_embedding.at(i, j);
  }
  layer_norm_rows(x, d, ln_embed_gamma, ln_embed_beta);
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  for (const auto& layer : layers) {
    const std::size_t kept = layer.kept_heads.size();
    std::vector<double> heads_out(n * kept * dh, 0.0);
    if (kept > 0) {
      const auto q = affine(x, n, layer.q, layer.bq);
      const auto k = affine(x, n, layer.k, layer.bk);
      const auto v = affine(x, n, layer.v, layer.bv);
      const std::size_t w = kept * dh;
      std::vector<double> att(n);
      for (std::size_t h = 0; h < kept; ++h) {
        for (std::size_t i = 0; i < n; ++i) {
          double mx = -INFINITY;
          for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < dh; ++p) s += q[i * w + h * dh + p] * k[j * w + h * dh + p];
            att[j] = s * inv_sqrt_dh;
            mx = std::max(mx, att[j]);
          }
          double z = 0.0;
          for (std::size_t j = 0; j < n; ++j) z += (att[j] = std::exp(att[j] - mx));
          for (std::size_t j = 0; j < n; ++j) {
            const double a = att[j] / z;
            for (std::size_t p = 0; p < dh; ++p) heads_out[i * w + h * dh + p] += a * v[j * w + h * dh + p];
          }
        }
      }
    }
    const auto attended = affine(heads_out, n, layer.o, layer.bo);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += attended[i];
    layer_norm_rows(x, d, layer.ln_attn_gamma, layer.ln_attn_beta);

    auto hidden = affine(x, n, layer.u, layer.bu);
    for (double& h : hidden) h = gelu(h);
    const auto ffn = affine(hidden, n, layer.d, layer.bd);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += ffn[i];
    layer_norm_rows(x, d, layer.ln_ffn_gamma, layer.ln_ffn_beta);
  }

  std::vector<double> logits(head.rows);
  for (std::size_t c = 0; c < head.rows; ++c) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) acc += x[j] * head.at(c, j);
    logits[c] = acc;
  }
  return logits;
}

CompactionResult compact(const EncoderModel& model, const MaskArtifact& masks, std::size_t min_row_weights,
                         std::size_t probe_count, std::uint64_t probe_seed) {
  EncoderModel masked = model.clone();
  apply_artifact(masked, masks);
  const auto& cfg = masked.config;
  const std::size_t d = cfg.hidden_dim, dh = cfg.head_dim(), f = cfg.ffn_dim;
  const std::size_t unit_threshold = std::max<std::size_t>(min_row_weights, 1);

  CompactionResult result;
  CompactedModel& cm = result.model;
  cm.config = cfg;
  cm.label_token_ids = masked.head.label_token_ids;
  cm.token_embedding = to_dense(masked.token_embedding);
  cm.position_embedding = to_dense(masked.position_embedding);
  cm.head = to_dense(masked.head.label_embeddings);
  cm.ln_embed_gamma = to_vector(masked.ln_embed_gamma);
  cm.ln_embed_beta = to_vector(masked.ln_embed_beta);

  for (const auto& layer : masked.layers) {
    auto effective = [&](MatrixType t) {
      const MaskedLinear& lin = layer.at(t);
      DenseMatrix m = to_dense(lin.weight);
      for (std::size_t i = 0; i < m.values.size(); ++i)
        if (!lin.mask[i]) m.values[i] = 0.0;
      return m;
    };
    const DenseMatrix q = effective(MatrixType::Q), k = effective(MatrixType::K), v = effective(MatrixType::V);
    const DenseMatrix o = effective(MatrixType::O), u = effective(MatrixType::U), dn = effective(MatrixType::D);
    if (u.rows != dn.cols || u.cols != d || dn.rows != d || o.cols != q.rows) {
      fail(ErrorKind::Shape, "compact: paired matrices disagree on their shared dimension");
    }
    auto mask_of = [&](MatrixType t) -> const Mask& { return layer.at(t).mask; };

    CompactedLayer out;
    // Heads whose four slices are all pruned.
    for (std::uint32_t h = 0; h < cfg.num_heads; ++h) {
      bool empty = true;
      for (MatrixType t : {MatrixType::Q, MatrixType::K, MatrixType::V})
        for (std::size_t r = h * dh; r < (h + 1) * dh && empty; ++r)
          for (std::size_t c = 0; c < d && empty; ++c) empty = !mask_of(t)[r * d + c];
      for (std::size_t r = 0; r < d && empty; ++r)
        for (std::size_t c = h * dh; c < (h + 1) * dh && empty; ++c) empty = !mask_of(MatrixType::O)[r * d + c];
      if (!empty) out.kept_heads.push_back(h);
    }
    result.report.removed_heads += cfg.num_heads - out.kept_heads.size();

    auto bias = [&](MatrixType t) { return to_vector(layer.at(t).bias); };
    out.bo = bias(MatrixType::O);
    out.bu.clear();
    out.bd = bias(MatrixType::D);
    const auto bu_full = bias(MatrixType::U);
    const auto bq_full = bias(MatrixType::Q), bk_full = bias(MatrixType::K), bv_full = bias(MatrixType::V);

    const std::size_t w = out.kept_heads.size() * dh;
    out.q = {w, d, {}};
    out.k = {w, d, {}};
    out.v = {w, d, {}};
    out.o = {d, w, std::vector<double>(d * w)};
    for (std::size_t hi = 0; hi < out.kept_heads.size(); ++hi) {
      const std::size_t h = out.kept_heads[hi];
      for (std::size_t r = h * dh; r < (h + 1) * dh; ++r) {
        out.q.values.insert(out.q.values.end(), q.values.begin() + r * d, q.values.begin() + (r + 1) * d);
        out.k.values.insert(out.k.values.end(), k.values.begin() + r * d, k.values.begin() + (r + 1) * d);
        out.v.values.insert(out.v.values.end(), v.values.begin() + r * d, v.values.begin() + (r + 1) * d);
        out.bq.push_back(bq_full[r]);
        out.bk.push_back(bk_full[r]);
        out.bv.push_back(bv_full[r]);
      }
      for (std::size_t r = 0; r < d; ++r)
        for (std::size_t p = 0; p < dh; ++p) out.o.values[r * w + hi * dh + p] = o.at(r, h * dh + p);
    }

    // FFN units: too few surviving W_U weights, or a dead W_D column.
    for (std::uint32_t j = 0; j < f; ++j) {
      std::size_t row_kept = 0;
      for (std::size_t c = 0; c < d; ++c) row_kept += mask_of(MatrixType::U)[j * d + c];
      bool column_dead = true;
      for (std::size_t r = 0; r < d && column_dead; ++r) column_dead = !mask_of(MatrixType::D)[r * f + j];
      if (row_kept >= unit_threshold && !column_dead) {
        out.kept_units.push_back(j);
        continue;
      }
      if (!column_dead) {
        const double constant = gelu(bu_full[j]);
        for (std::size_t r = 0; r < d; ++r) out.bd[r] += constant * dn.at(r, j);
      }
    }
    result.report.removed_units += f - out.kept_units.size();
    const std::size_t ku = out.kept_units.size();
    out.u = {ku, d, {}};
    out.d = {d, ku, std::vector<double>(d * ku)};
    for (std::size_t ui = 0; ui < ku; ++ui) {
      const std::size_t j = out.kept_units[ui];
      out.u.values.insert(out.u.values.end(), u.values.begin() + j * d, u.values.begin() + (j + 1) * d);
      out.bu.push_back(bu_full[j]);
      for (std::size_t r = 0; r < d; ++r) out.d.values[r * ku + ui] = dn.at(r, j);
    }
    out.ln_attn_gamma = to_vector(layer.ln_attn_gamma);
    out.ln_attn_beta = to_vector(layer.ln_attn_beta);
    out.ln_ffn_gamma = to_vector(layer.ln_ffn_gamma);
    out.ln_ffn_beta = to_vector(layer.ln_ffn_beta);
    cm.layers.push_back(std::move(out));
  }

  auto& rep = result.report;
  rep.min_row_weights = min_row_weights;
  rep.original_parameters = prunable_parameter_count(cfg);
  rep.compacted_parameters = cm.parameter_count();
  rep.probe_count = probe_count;

  Rng rng(probe_seed);
  const auto weights = effective_weights(masked, GradMode::None);
  for (std::size_t p = 0; p < probe_count; ++p) {
    const std::size_t len = 1 + uniform_index(rng, cfg.max_seq_len);
    std::vector<std::uint32_t> ids{kClsTokenId};
    while (ids.size() < len) ids.push_back(static_cast<std::uint32_t>(uniform_index(rng, cfg.vocab_size)));
    const Tensor expected = forward(masked, weights, ids);
    const auto actual = cm.forward(ids);
    for (std::size_t c = 0; c < actual.size(); ++c)
      rep.max_deviation = std::max(rep.max_deviation, std::abs(expected.data()[c] - actual[c]));
  }
  return result;
}

Bytes save_compacted(const CompactedModel& m) {
  const std::size_t tensors = 5 + m.layers.size() * 16;
  ByteWriter w;
  write_checkpoint_header(w, m.config, m.label_token_ids, tensors);
  write_matrix(w, "embed.token", m.token_embedding);
  write_matrix(w, "embed.position", m.position_embedding);
  write_vector(w, "embed.ln.gamma", m.ln_embed_gamma);
  write_vector(w, "embed.ln.beta", m.ln_embed_beta);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const auto& L = m.layers[l];
    const std::string p = "layer" + std::to_string(l);
    const std::pair<const DenseMatrix*, const std::vector<double>*> mats[] = {
        {&L.q, &L.bq}, {&L.k, &L.bk}, {&L.v, &L.bv}, {&L.o, &L.bo}, {&L.u, &L.bu}, {&L.d, &L.bd}};
    for (std::size_t t = 0; t < 6; ++t) {
      const std::string name = matrix_name(l, kMatrixTypes[t]);
      write_matrix(w, name + ".weight", *mats[t].first);
      write_vector(w, name + ".bias", *mats[t].second);
    }
    write_vector(w, p + ".ln_attn.gamma", L.ln_attn_gamma);
    write_vector(w, p + ".ln_attn.beta", L.ln_attn_beta);
    write_vector(w, p + ".ln_ffn.gamma", L.ln_ffn_gamma);
    write_vector(w, p + ".ln_ffn.beta", L.ln_ffn_beta);
  }
  write_matrix(w, "head.label_embeddings", m.head);
  w.raw(std::array<std::uint8_t, 4>{'I', 'M', 'A', 'P'});
  w.u32(static_cast<std::uint32_t>(m.layers.size()));
  for (const auto& L : m.layers) {
    w.u32(static_cast<std::uint32_t>(L.kept_heads.size()));
    for (auto h : L.kept_heads) w.u32(h);
    w.u32(static_cast<std::uint32_t>(L.kept_units.size()));
    for (auto u : L.kept_units) w.u32(u);
  }
  return w.take();
}

CompactedModel load_compacted(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const CheckpointContents c = read_checkpoint_body(r);
  auto tag = r.raw(4);
  if (!std::equal(tag.begin(), tag.end(), "IMAP")) fail(ErrorKind::Corrupt, "compacted checkpoint: missing index map");
  CompactedModel m;
  m.config = c.config;
  m.label_token_ids = c.label_ids;
  auto matrix = [&](const std::string& name) {
    const auto& t = find_tensor(c, name);
    if (t.shape.size() != 2) fail(ErrorKind::Corrupt, "compacted checkpoint: '" + name + "' is not a matrix");
    return DenseMatrix{t.shape[0], t.shape[1], t.values};
  };
  auto vec = [&](const std::string& name) { return find_tensor(c, name).values; };
  m.token_embedding = matrix("embed.token");
  m.position_embedding = matrix("embed.position");
  m.ln_embed_gamma = vec("embed.ln.gamma");
  m.ln_embed_beta = vec("embed.ln.beta");
  m.head = matrix("head.label_embeddings");
  const std::uint32_t layers = r.u32();
  if (layers != m.config.num_layers) fail(ErrorKind::Corrupt, "compacted checkpoint: index map layer count");
  for (std::uint32_t l = 0; l < layers; ++l) {
    CompactedLayer L;
    const std::uint32_t nh = r.u32();
    for (std::uint32_t i = 0; i < nh; ++i) L.kept_heads.push_back(r.u32());
    const std::uint32_t nu = r.u32();
    for (std::uint32_t i = 0; i < nu; ++i) L.kept_units.push_back(r.u32());
    const std::string p = "layer" + std::to_string(l);
    DenseMatrix* mats[] = {&L.q, &L.k, &L.v, &L.o, &L.u, &L.d};
    std::vector<double>* biases[] = {&L.bq, &L.bk, &L.bv, &L.bo, &L.bu, &L.bd};
    for (std::size_t t = 0; t < 6; ++t) {
      const std::string name = matrix_name(l, kMatrixTypes[t]);
      *mats[t] = matrix(name + ".weight");
      *biases[t] = vec(name + ".bias");
    }
    L.ln_attn_gamma = vec(p + ".ln_attn.gamma");
    L.ln_attn_beta = vec(p + ".ln_attn.beta");
    L.ln_ffn_gamma = vec(p + ".ln_ffn.gamma");
    L.ln_ffn_beta = vec(p + ".ln_ffn.beta");
    m.layers.push_back(std::move(L));
  }
  if (!r.done()) fail(ErrorKind::Corrupt, "compacted checkpoint: trailing bytes");
  return m;
}

}  // namespace smp
