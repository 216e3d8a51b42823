#include "mscreen/checkpoint.hpp"

#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace mscreen {

namespace {

constexpr const char* kMagic = "mscreen-checkpoint 1";

std::string format_real(double v) {
  std::array<char, 64> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

double parse_real(const std::string& s, const std::string& key) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw std::runtime_error("checkpoint: bad real '" + s + "' for " + key);
  }
  return v;
}

std::size_t parse_size(const std::string& s, const std::string& key) {
  std::size_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw std::runtime_error("checkpoint: bad integer '" + s + "' for " + key);
  }
  return v;
}

void put_le(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
}

double get_le(const std::string& blob, std::size_t offset) {
  std::uint64_t bits = 0;
  for (int b = 0; b < 8; ++b) {
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(blob[offset + b])) << (8 * b);
  }
  return std::bit_cast<double>(bits);
}

std::string shape_text(const std::vector<std::size_t>& shape) {
  std::string s;
  for (std::size_t k = 0; k < shape.size(); ++k) {
    if (k) s += ',';
    s += std::to_string(shape[k]);
  }
  return s;
}

using KeyValues = std::vector<std::pair<std::string, std::string>>;

KeyValues config_fields(const AnyModel& model) {
  KeyValues kv;
  if (const auto* ms = std::get_if<MultiscreenModel>(&model)) {
    const ModelConfig& c = ms->config;
    kv = {{"config.psi", std::to_string(c.psi)},
          {"config.n_layers", std::to_string(c.n_layers)},
          {"config.n_heads", std::to_string(c.n_heads)},
          {"config.d_e", std::to_string(c.d_e)},
          {"config.d_k", std::to_string(c.d_k)},
          {"config.d_v", std::to_string(c.d_v)},
          {"config.w_th", format_real(c.w_th)},
          {"config.vocab_size", std::to_string(c.vocab_size)},
          {"max_trained_len", std::to_string(c.max_trained_len)}};
    for (std::size_t l = 0; l < ms->params.tiles.size(); ++l) {
      for (std::size_t h = 0; h < ms->params.tiles[l].size(); ++h) {
        kv.emplace_back("tile." + std::to_string(l) + "." + std::to_string(h) +
                            ".inference_infinite",
                        ms->params.tiles[l][h].scalars.inference_infinite ? "1" : "0");
      }
    }
  } else {
    const BaselineConfig& c = std::get<BaselineModel>(model).config;
    kv = {{"config.n_layers", std::to_string(c.n_layers)},
          {"config.n_heads", std::to_string(c.n_heads)},
          {"config.d_e", std::to_string(c.d_e)},
          {"config.ffn_dim", std::to_string(c.ffn_dim)},
          {"config.rope_theta", format_real(c.rope_theta)},
          {"config.rope_scale", format_real(c.rope_scale)},
          {"config.vocab_size", std::to_string(c.vocab_size)}};
  }
  return kv;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& p, const std::string& data) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw std::runtime_error("write failed: " + p.string());
}

std::filesystem::path stem_of(const std::filesystem::path& p) {
  const auto ext = p.extension();
  if (ext == ".manifest" || ext == ".bin") {
    auto s = p;
    s.replace_extension();
    return s;
  }
  return p;
}

}  // namespace

std::filesystem::path manifest_path(const std::filesystem::path& stem) {
  auto p = stem_of(stem);
  p += ".manifest";
  return p;
}

std::filesystem::path blob_path(const std::filesystem::path& stem) {
  auto p = stem_of(stem);
  p += ".bin";
  return p;
}

void save_checkpoint(const std::filesystem::path& stem, const AnyModel& model,
                     const AdamState* optimizer) {
  AnyModel copy = model;
  auto refs = param_refs(copy);
  if (optimizer != nullptr && optimizer->m.size() != refs.size()) {
    throw std::invalid_argument("save_checkpoint: optimizer state does not match the model");
  }

  std::ostringstream manifest;
  manifest << kMagic << '\n';
  manifest << "kind = " << kind_name(kind_of(model)) << '\n';
  manifest << "blob = " << blob_path(stem).filename().string() << '\n';
  for (const auto& [k, v] : config_fields(model)) manifest << k << " = " << v << '\n';
  if (optimizer != nullptr) manifest << "optimizer.step = " << optimizer->step << '\n';

  std::string blob;
  auto emit = [&](const std::string& name, const std::vector<std::size_t>& shape,
                  std::span<const double> values) {
    manifest << "tensor " << name << " f64 " << shape_text(shape) << ' ' << blob.size() << '\n';
    for (double v : values) put_le(blob, v);
  };
  for (const ParamRef& r : refs) emit(r.name, r.shape, r.values);
  if (optimizer != nullptr) {
    for (std::size_t p = 0; p < refs.size(); ++p) emit("adam.m." + refs[p].name, refs[p].shape, optimizer->m[p]);
    for (std::size_t p = 0; p < refs.size(); ++p) emit("adam.v." + refs[p].name, refs[p].shape, optimizer->v[p]);
  }

  const auto dir = manifest_path(stem).parent_path();
  if (!dir.empty()) std::filesystem::create_directories(dir);
  write_file(blob_path(stem), blob);
  write_file(manifest_path(stem), manifest.str());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string text = read_file(manifest_path(path));
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kMagic) {
    throw std::runtime_error("checkpoint: " + manifest_path(path).string() +
                             " is not a checkpoint manifest");
  }

  std::map<std::string, std::string> kv;
  struct Entry {
    std::vector<std::size_t> shape;
    std::size_t offset = 0;
  };
  std::map<std::string, Entry> tensors;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("tensor ", 0) == 0) {
      std::istringstream ls(line.substr(7));
      std::string name, dtype, shape, offset;
      ls >> name >> dtype >> shape >> offset;
      if (dtype != "f64") throw std::runtime_error("checkpoint: unsupported dtype " + dtype);
      Entry e;
      std::istringstream ss(shape);
      std::string dim;
      while (std::getline(ss, dim, ',')) e.shape.push_back(parse_size(dim, name));
      e.offset = parse_size(offset, name);
      tensors[name] = std::move(e);
      continue;
    }
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) throw std::runtime_error("checkpoint: bad line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 3);
  }

  auto need = [&](const std::string& key) -> const std::string& {
    const auto it = kv.find(key);
    if (it == kv.end()) throw std::runtime_error("checkpoint: missing key " + key);
    return it->second;
  };
  auto size_of = [&](const std::string& key) { return parse_size(need(key), key); };

  Checkpoint ckpt;
  const ModelKind kind = parse_kind(need("kind"));
  if (kind == ModelKind::multiscreen) {
    MultiscreenModel m;
    m.config.psi = size_of("config.psi");
    m.config.n_layers = size_of("config.n_layers");
    m.config.n_heads = size_of("config.n_heads");
    m.config.d_e = size_of("config.d_e");
    m.config.d_k = size_of("config.d_k");
    m.config.d_v = size_of("config.d_v");
    m.config.w_th = parse_real(need("config.w_th"), "config.w_th");
    m.config.vocab_size = size_of("config.vocab_size");
    m.config.max_trained_len = size_of("max_trained_len");
    m.params = init_params(m.config, 0);
    for (std::size_t l = 0; l < m.config.n_layers; ++l) {
      for (std::size_t h = 0; h < m.config.n_heads; ++h) {
        const std::string key =
            "tile." + std::to_string(l) + "." + std::to_string(h) + ".inference_infinite";
        m.params.tiles[l][h].scalars.inference_infinite = size_of(key) != 0;
      }
    }
    ckpt.model = std::move(m);
  } else {
    BaselineModel b;
    b.config.n_layers = size_of("config.n_layers");
    b.config.n_heads = size_of("config.n_heads");
    b.config.d_e = size_of("config.d_e");
    b.config.ffn_dim = size_of("config.ffn_dim");
    b.config.rope_theta = parse_real(need("config.rope_theta"), "config.rope_theta");
    b.config.rope_scale = parse_real(need("config.rope_scale"), "config.rope_scale");
    b.config.vocab_size = size_of("config.vocab_size");
    b.params = init_baseline(b.config, 0);
    ckpt.model = std::move(b);
  }

  std::filesystem::path blob_file = manifest_path(path).parent_path() / need("blob");
  const std::string blob = read_file(blob_file);

  auto fill = [&](const std::string& name, const std::vector<std::size_t>& shape,
                  std::span<double> dst) {
    const auto it = tensors.find(name);
    if (it == tensors.end()) throw std::runtime_error("checkpoint: missing tensor " + name);
    if (it->second.shape != shape) {
      throw std::runtime_error("checkpoint: tensor " + name + " has shape " +
                               shape_text(it->second.shape) + ", expected " + shape_text(shape));
    }
    const std::size_t end = it->second.offset + 8 * dst.size();
    if (end > blob.size()) throw std::runtime_error("checkpoint: blob too short for " + name);
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = get_le(blob, it->second.offset + 8 * k);
  };

  auto refs = param_refs(ckpt.model);
  for (const ParamRef& r : refs) fill(r.name, r.shape, r.values);

  if (kv.contains("optimizer.step")) {
    AdamState st = AdamState::zeros_for(refs);
    st.step = static_cast<std::int64_t>(size_of("optimizer.step"));
    for (std::size_t p = 0; p < refs.size(); ++p) {
      fill("adam.m." + refs[p].name, refs[p].shape, st.m[p]);
      fill("adam.v." + refs[p].name, refs[p].shape, st.v[p]);
    }
    ckpt.optimizer = std::move(st);
  }
  return ckpt;
}

}  // namespace mscreen
