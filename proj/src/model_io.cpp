#include "cprune/model_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "cprune/error.hpp"

namespace cprune {

namespace {

constexpr char kMagic[4] = {'C', 'P', 'R', 'M'};

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}

  template <typename T>
  T get() {
    if (off_ + sizeof(T) > bytes_.size()) throw FormatError("model file truncated");
    std::uint8_t buf[sizeof(T)];
    std::memcpy(buf, bytes_.data() + off_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    off_ += sizeof(T);
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
  }

  Matrix matrix(std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    for (double& v : m.data) v = get<double>();
    return m;
  }

  bool done() const { return off_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t off_ = 0;
};

void put_matrix(std::vector<std::uint8_t>& out, const Matrix& m) {
  for (double v : m.data) put(out, v);
}

}  // namespace

std::vector<std::uint8_t> serialize_model(const Model& model) {
  const ModelSpec& s = model.spec();
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put<std::uint32_t>(out, kModelFormatVersion);
  for (std::size_t f : {s.num_layers, s.num_heads, s.model_dim, s.head_dim, s.vocab_size,
                        s.max_seq_len})
    put<std::uint32_t>(out, static_cast<std::uint32_t>(f));
  put<std::uint64_t>(out, model.seed());
  put_matrix(out, model.token_embedding());
  put_matrix(out, model.position_embedding());
  for (const auto& l : model.layers()) {
    for (const Matrix* m : {&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2}) put_matrix(out, *m);
  }
  put_matrix(out, model.unembedding());
  return out;
}

Model deserialize_model(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw FormatError("not a CPRM model file (bad magic)");
  std::vector<std::uint8_t> body(bytes.begin() + 4, bytes.end());
  Reader r(body);
  const auto version = r.get<std::uint32_t>();
  if (version != kModelFormatVersion)
    throw FormatError("unsupported model format version " + std::to_string(version));
  ModelSpec s;
  s.num_layers = r.get<std::uint32_t>();
  s.num_heads = r.get<std::uint32_t>();
  s.model_dim = r.get<std::uint32_t>();
  s.head_dim = r.get<std::uint32_t>();
  s.vocab_size = r.get<std::uint32_t>();
  s.max_seq_len = r.get<std::uint32_t>();
  const auto seed = r.get<std::uint64_t>();
  s.validate();
  const std::size_t c = s.model_dim, f = s.ffn_dim();
  Matrix tok = r.matrix(s.vocab_size, c);
  Matrix pos = r.matrix(s.max_seq_len, c);
  std::vector<LayerWeights> layers(s.num_layers);
  for (auto& l : layers) {
    l.wq = r.matrix(c, c);
    l.wk = r.matrix(c, c);
    l.wv = r.matrix(c, c);
    l.wo = r.matrix(c, c);
    l.w1 = r.matrix(c, f);
    l.w2 = r.matrix(f, c);
  }
  Matrix unembed = r.matrix(c, s.vocab_size);
  if (!r.done()) throw FormatError("trailing bytes after model payload");
  return Model(s, seed, std::move(tok), std::move(pos), std::move(layers), std::move(unembed));
}

void save_model(const Model& model, const std::filesystem::path& path) {
  const auto bytes = serialize_model(model);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing " + path.string());
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open model file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

}  // namespace cprune
