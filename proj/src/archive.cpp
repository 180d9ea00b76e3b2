#include "hagd/archive.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <memory>

#include "hagd/error.hpp"

namespace hagd {

using nlohmann::json;
using ad::Tensor;
using ad::Var;

static_assert(std::endian::native == std::endian::little, "archives store little-endian doubles");

namespace {

constexpr char magic[] = "HAGDARC1";
constexpr std::size_t magic_len = 8;
constexpr int archive_version = 1;

}  // namespace

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256: digest failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) out += hex[md[i] >> 4], out += hex[md[i] & 15];
  return out;
}

const Tensor& WeightArchive::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw ParseError("archive '" + kind + "' has no tensor '" + name + "'", 0);
}

std::string write_archive(const WeightArchive& a) {
  json table = json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : a.tensors) {
    table.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size();
  }
  const std::string header =
      json{{"kind", a.kind}, {"version", archive_version}, {"config", a.config}, {"tensors", table}}.dump();
  std::string out(magic, magic_len);
  const std::uint64_t hlen = header.size();
  out.append(reinterpret_cast<const char*>(&hlen), sizeof hlen);
  out += header;
  for (const auto& [name, t] : a.tensors)
    out.append(reinterpret_cast<const char*>(t.raw().data()), t.size() * sizeof(double));
  return out;
}

WeightArchive read_archive(const std::string& bytes, const std::string& expected_kind) {
  if (bytes.size() < magic_len + 8 || bytes.compare(0, magic_len, magic) != 0)
    throw ParseError("not a weight archive", 0);
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + magic_len, sizeof hlen);
  const std::size_t body = magic_len + 8 + hlen;
  if (hlen > bytes.size() || body > bytes.size()) throw ParseError("archive header truncated", magic_len);
  json h;
  try {
    h = json::parse(bytes.substr(magic_len + 8, hlen));
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("archive header: ") + e.what(), magic_len + 8 + e.byte);
  }
  WeightArchive a;
  try {
    a.kind = h.at("kind").get<std::string>();
    if (a.kind != expected_kind) throw ParseError("archive holds '" + a.kind + "', expected '" + expected_kind + "'", 0);
    if (h.at("version").get<int>() != archive_version)
      throw ParseError("unsupported archive version " + h.at("version").dump(), 0);
    a.config = h.at("config");
    const std::size_t count = (bytes.size() - body) / sizeof(double);
    if ((bytes.size() - body) % sizeof(double) != 0) throw ParseError("archive payload is not whole doubles", body);
    std::size_t expected = 0;
    for (const auto& e : h.at("tensors")) {
      ad::Shape shape = e.at("shape").get<ad::Shape>();
      const std::size_t off = e.at("offset").get<std::size_t>(), n = ad::shape_size(shape);
      if (off != expected || off + n > count)
        throw ParseError("tensor '" + e.at("name").get<std::string>() + "' lies outside the payload", body + off * 8);
      std::vector<double> data(n);
      if (n) std::memcpy(data.data(), bytes.data() + body + off * sizeof(double), n * sizeof(double));
      a.tensors.emplace_back(e.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data)));
      expected = off + n;
    }
    if (expected != count) throw ParseError("archive payload has trailing data", body + expected * 8);
  } catch (const json::exception& e) {
    throw ParseError(std::string("archive header: ") + e.what(), magic_len + 8);
  }
  return a;
}

json to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},     {"hidden_dim", c.hidden_dim},   {"n_heads", c.n_heads},
          {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}, {"mlp_ratio", c.mlp_ratio},
          {"seed", c.seed}};
}

ModelConfig model_config_from_json(const json& j) {
  try {
    ModelConfig c;
    c.n_layers = j.at("n_layers");
    c.hidden_dim = j.at("hidden_dim");
    c.n_heads = j.at("n_heads");
    c.vocab_size = j.at("vocab_size");
    c.max_seq_len = j.at("max_seq_len");
    c.mlp_ratio = j.at("mlp_ratio");
    c.seed = j.at("seed");
    return c;
  } catch (const json::exception& e) {
    throw ParseError(std::string("model config: ") + e.what(), 0);
  }
}

namespace {

void assign(Var& v, const Tensor& t, const std::string& name) {
  if (v.shape() != t.shape())
    throw ParseError("tensor '" + name + "' has shape " + ad::shape_string(t.shape()) + ", expected " +
                         ad::shape_string(v.shape()),
                     0);
  v.mutable_value() = t;
}

std::vector<std::pair<std::string, Var>> transcoder_tensors(const Transcoders& tc) {
  std::vector<std::pair<std::string, Var>> out;
  for (std::size_t l = 0; l < tc.layers.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    out.insert(out.end(), {{p + "w_enc", tc.layers[l].w_enc}, {p + "b_enc", tc.layers[l].b_enc},
                           {p + "dec", tc.layers[l].dec}});
  }
  for (std::size_t l = 0; l < tc.heads.size(); ++l) {
    const std::string p = "head" + std::to_string(l) + ".";
    out.insert(out.end(), {{p + "w", tc.heads[l].w}, {p + "b", tc.heads[l].b}});
  }
  return out;
}

std::vector<std::pair<std::string, Var>> gnn_tensors(const GnnParams& p) {
  std::vector<std::pair<std::string, Var>> out{{"w_in", p.w_in}, {"b_in", p.b_in}};
  for (std::size_t r = 0; r < p.rounds.size(); ++r) {
    const auto& g = p.rounds[r];
    const std::string s = "round" + std::to_string(r) + ".";
    out.insert(out.end(), {{s + "w1", g.w1}, {s + "b1", g.b1}, {s + "w2", g.w2}, {s + "b2", g.b2},
                           {s + "a_src", g.a_src}, {s + "a_dst", g.a_dst}});
  }
  out.insert(out.end(), {{"w_out", p.w_out}, {"b_out", p.b_out}});
  return out;
}

std::string save(const std::string& kind, json config, const std::vector<std::pair<std::string, Var>>& named) {
  WeightArchive a{kind, std::move(config), {}};
  for (const auto& [n, v] : named) a.tensors.emplace_back(n, v.value());
  return write_archive(a);
}

void load_into(const WeightArchive& a, const std::vector<std::pair<std::string, Var>>& named) {
  if (a.tensors.size() != named.size())
    throw ParseError("archive '" + a.kind + "' holds " + std::to_string(a.tensors.size()) + " tensors, expected " +
                         std::to_string(named.size()),
                     0);
  for (auto [n, v] : named) assign(v, a.tensor(n), n);
}

}  // namespace

std::string save_model(const Transformer& model, const json& extra) {
  return save("model", {{"model", to_json(model.config())}, {"extra", extra}}, model.named_parameters());
}

Transformer load_model(const std::string& bytes) {
  WeightArchive a = read_archive(bytes, "model");
  Transformer m(model_config_from_json(a.config.at("model")));
  load_into(a, m.named_parameters());
  return m;
}

std::string save_transcoders(const Transcoders& tc, const json& extra) {
  json c{{"n_layers", tc.n_layers()}, {"d", tc.d},     {"m", tc.m},
         {"k", tc.k},                 {"lambda1", tc.weights.lambda1}, {"lambda2", tc.weights.lambda2},
         {"literal_prediction", tc.literal_prediction}, {"input_scale", tc.input_scale},
         {"fvu", tc.fvu},             {"extra", extra}};
  return save("transcoders", std::move(c), transcoder_tensors(tc));
}

Transcoders load_transcoders(const std::string& bytes) {
  WeightArchive a = read_archive(bytes, "transcoders");
  try {
    const json& c = a.config;
    TranscoderConfig cfg;
    cfg.dict_size = c.at("m");
    cfg.k = c.at("k");
    cfg.weights = {c.at("lambda1"), c.at("lambda2")};
    cfg.literal_prediction = c.at("literal_prediction");
    Transcoders tc = init_transcoders(c.at("n_layers"), c.at("d"), cfg);
    tc.input_scale = c.at("input_scale").get<std::vector<double>>();
    tc.fvu = c.at("fvu").get<std::vector<double>>();
    load_into(a, transcoder_tensors(tc));
    return tc;
  } catch (const json::exception& e) {
    throw ParseError(std::string("transcoder config: ") + e.what(), 0);
  }
}

std::string save_gnn(const GnnParams& p, const json& extra) {
  return save("gnn", {{"width", p.width}, {"rounds", p.rounds.size()}, {"extra", extra}}, gnn_tensors(p));
}

GnnParams load_gnn(const std::string& bytes) {
  WeightArchive a = read_archive(bytes, "gnn");
  try {
    GnnParams p = init_gnn({.width = a.config.at("width"), .rounds = a.config.at("rounds")});
    load_into(a, gnn_tensors(p));
    return p;
  } catch (const json::exception& e) {
    throw ParseError(std::string("gnn config: ") + e.what(), 0);
  }
}

}  // namespace hagd
