#include "milforge/model.hpp"

#include <cstring>
#include <fstream>

namespace milforge {

ModelKind parse_model_kind(const std::string& s) {
  if (s == "maxpool") return ModelKind::maxpool;
  if (s == "meanpool") return ModelKind::meanpool;
  if (s == "abmil") return ModelKind::abmil;
  if (s == "clamsb") return ModelKind::clamsb;
  if (s == "pathmil") return ModelKind::pathmil;
  throw ConfigError("unknown model kind '" + s + "' (maxpool|meanpool|abmil|clamsb|pathmil)");
}

PeMode parse_pe_mode(const std::string& s) {
  if (s == "none") return PeMode::none;
  if (s == "2d") return PeMode::twod;
  throw ConfigError("unknown positional encoding mode '" + s + "' (none|2d)");
}

const char* to_string(ModelKind k) {
  switch (k) {
    case ModelKind::maxpool: return "maxpool";
    case ModelKind::meanpool: return "meanpool";
    case ModelKind::abmil: return "abmil";
    case ModelKind::clamsb: return "clamsb";
    case ModelKind::pathmil: return "pathmil";
  }
  return "?";
}

const char* to_string(PeMode p) { return p == PeMode::none ? "none" : "2d"; }

namespace {

constexpr char kMagic[4] = {'M', 'I', 'L', 'W'};
constexpr std::uint32_t kVersionCk = 1;

template <typename T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_le<std::uint32_t>(out, bits);
}

struct Reader {
  std::vector<char> buf;
  std::size_t pos = 0;
  std::string path;

  void need(std::size_t n, const char* what) {
    if (pos + n > buf.size())
      throw FormatError(path + ": truncated checkpoint reading " + what + " at byte offset " +
                        std::to_string(pos));
  }
  template <typename T>
  T le(const char* what) {
    need(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= T(std::uint8_t(buf[pos + i])) << (8 * i);
    pos += sizeof(T);
    return v;
  }
  float f32(const char* what) {
    const std::uint32_t bits = le<std::uint32_t>(what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
};

}  // namespace

void save_checkpoint(const std::string& path, MilModel<float>& model) {
  std::string out;
  out.append(kMagic, 4);
  put_le<std::uint32_t>(out, kVersionCk);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(model.config.kind));
  put_le<std::uint32_t>(out, model.config.num_classes);
  put_le<std::uint32_t>(out, model.config.feature_dim);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(model.config.pe));
  put_f32(out, model.config.sigma);
  put_le<std::uint32_t>(out, model.config.heads);

  auto params = model.params();
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p->name.size()));
    out.append(p->name);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p->value.ndim()));
    for (std::size_t d : p->value.shape) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (float v : p->value.data) put_f32(out, v);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot write checkpoint: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

MilModel<float> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint: " + path);
  Reader r;
  r.path = path;
  r.buf.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  r.need(4, "magic");
  if (std::memcmp(r.buf.data(), kMagic, 4) != 0)
    throw FormatError(path + ": bad checkpoint magic, expected \"MILW\"");
  r.pos = 4;
  if (r.le<std::uint32_t>("version") != kVersionCk)
    throw FormatError(path + ": unsupported checkpoint version");

  ModelConfig cfg;
  cfg.kind = static_cast<ModelKind>(r.le<std::uint32_t>("kind"));
  cfg.num_classes = r.le<std::uint32_t>("num_classes");
  cfg.feature_dim = r.le<std::uint32_t>("feature_dim");
  cfg.pe = static_cast<PeMode>(r.le<std::uint32_t>("pe"));
  cfg.sigma = r.f32("sigma");
  cfg.heads = r.le<std::uint32_t>("heads");

  MilModel<float> model = MilModel<float>::make(cfg, 0);
  auto params = model.params();
  const auto count = r.le<std::uint32_t>("param_count");
  if (count != params.size())
    throw FormatError(path + ": checkpoint has " + std::to_string(count) + " parameters, model expects " +
                      std::to_string(params.size()));
  for (auto* p : params) {
    const auto name_len = r.le<std::uint32_t>("name_len");
    r.need(name_len, "name");
    const std::string name(r.buf.data() + r.pos, name_len);
    r.pos += name_len;
    if (name != p->name)
      throw FormatError(path + ": parameter order mismatch, got '" + name + "', expected '" + p->name + "'");
    const auto ndim = r.le<std::uint32_t>("ndim");
    std::vector<std::size_t> shape(ndim);
    for (auto& d : shape) d = r.le<std::uint32_t>("dim");
    if (shape != p->value.shape)
      throw FormatError(path + ": shape mismatch for parameter '" + name + "'");
    for (auto& v : p->value.data) v = r.f32("blob");
  }
  if (r.pos != r.buf.size())
    throw FormatError(path + ": trailing bytes at byte offset " + std::to_string(r.pos));
  return model;
}

}  // namespace milforge
