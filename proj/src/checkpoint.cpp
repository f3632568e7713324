#include "pmlab/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace pmlab {

namespace {

constexpr unsigned char kMagic[8] = {'P', 'M', 'L', 'A', 'B', 0, 0, 1};

void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void put_f64_le(std::string& out, double d) {
  put_u64_le(out, std::bit_cast<std::uint64_t>(d));
}

double get_f64_le(const unsigned char* p) {
  return std::bit_cast<double>(get_u64_le(p));
}

std::size_t tensor_count(const NamedTensor& t) {
  std::size_t n = 1;
  for (auto s : t.shape) n *= s;
  return n;
}

}  // namespace

void write_checkpoint_file(const std::string& path, const CheckpointData& data) {
  nlohmann::ordered_json manifest;
  manifest["format_version"] = data.format_version;
  manifest["kind"] = data.kind;
  manifest["config"] = data.config;
  nlohmann::ordered_json params = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  for (const auto& t : data.tensors) {
    if (tensor_count(t) != t.data.size()) {
      throw std::invalid_argument("write_checkpoint: shape/data mismatch for " + t.name);
    }
    nlohmann::ordered_json e;
    e["name"] = t.name;
    e["shape"] = t.shape;
    e["offset"] = offset;
    params.push_back(e);
    offset += t.data.size() * sizeof(double);
  }
  manifest["params"] = params;
  manifest["metadata"] = data.metadata;

  const std::string manifest_str = manifest.dump();
  std::string out;
  out.reserve(16 + manifest_str.size() + offset);
  out.append(reinterpret_cast<const char*>(kMagic), 8);
  put_u64_le(out, manifest_str.size());
  out.append(manifest_str);
  for (const auto& t : data.tensors) {
    for (double d : t.data) put_f64_le(out, d);
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("write_checkpoint: cannot open " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("write_checkpoint: write failed for " + path);
}

CheckpointData read_checkpoint_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_checkpoint: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());

  if (bytes.size() < 16 || std::memcmp(p, kMagic, 8) != 0) {
    throw std::runtime_error("read_checkpoint: bad magic in " + path);
  }
  const std::uint64_t manifest_len = get_u64_le(p + 8);
  if (16 + manifest_len > bytes.size()) {
    throw std::runtime_error("read_checkpoint: truncated manifest in " + path);
  }
  nlohmann::ordered_json manifest;
  try {
    manifest = nlohmann::ordered_json::parse(bytes.substr(16, manifest_len));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("read_checkpoint: manifest parse error in " + path + ": " + e.what());
  }

  CheckpointData data;
  data.format_version = manifest.at("format_version").get<int>();
  if (data.format_version != 1) {
    throw std::runtime_error("read_checkpoint: unsupported format version in " + path);
  }
  data.kind = manifest.at("kind").get<std::string>();
  data.config = manifest.at("config");
  data.metadata = manifest.at("metadata");

  const std::size_t blob_begin = 16 + manifest_len;
  const std::size_t blob_size = bytes.size() - blob_begin;

  std::size_t expected_offset = 0;
  for (const auto& e : manifest.at("params")) {
    NamedTensor t;
    t.name = e.at("name").get<std::string>();
    t.shape = e.at("shape").get<std::vector<std::size_t>>();
    const auto offset = e.at("offset").get<std::size_t>();
    if (offset != expected_offset) {
      throw std::runtime_error("read_checkpoint: overlapping or out-of-order offsets in " + path);
    }
    const std::size_t count = tensor_count(t);
    if (offset + count * sizeof(double) > blob_size) {
      throw std::runtime_error("read_checkpoint: truncated blob in " + path);
    }
    t.data.resize(count);
    const unsigned char* src = p + blob_begin + offset;
    for (std::size_t i = 0; i < count; ++i) t.data[i] = get_f64_le(src + i * sizeof(double));
    expected_offset = offset + count * sizeof(double);
    data.tensors.push_back(std::move(t));
  }
  if (expected_offset != blob_size) {
    throw std::runtime_error("read_checkpoint: blob length mismatch in " + path);
  }
  return data;
}

nlohmann::ordered_json model_config_to_json(const ModelConfig& config) {
  nlohmann::ordered_json j;
  j["n_layers"] = config.n_layers;
  j["d_model"] = config.d_model;
  j["d_ffn"] = config.d_ffn;
  j["n_heads"] = config.n_heads;
  j["vocab_size"] = config.vocab_size;
  j["max_seq_len"] = config.max_seq_len;
  j["seed"] = config.seed;
  return j;
}

ModelConfig model_config_from_json(const nlohmann::ordered_json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_ffn = j.at("d_ffn").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

nlohmann::ordered_json plan_to_json(const SuppressionPlan& plan) {
  nlohmann::ordered_json j;
  j["kind"] = to_string(plan.kind);
  j["layers"] = plan.layers;
  j["lambda"] = plan.lambda;
  nlohmann::ordered_json mask = nlohmann::ordered_json::array();
  for (const auto& ref : plan.param_mask) {
    mask.push_back({{"name", ref.name}, {"index", ref.index}});
  }
  j["param_mask"] = mask;
  return j;
}

SuppressionPlan plan_from_json(const nlohmann::ordered_json& j) {
  SuppressionPlan plan;
  plan.kind = suppression_kind_from_string(j.at("kind").get<std::string>());
  plan.layers = j.at("layers").get<std::vector<int>>();
  plan.lambda = j.at("lambda").get<double>();
  for (const auto& e : j.at("param_mask")) {
    plan.param_mask.push_back({e.at("name").get<std::string>(), e.at("index").get<std::size_t>()});
  }
  return plan;
}

namespace {

NamedTensor from_matrix(const std::string& name, const Matrix& m) {
  NamedTensor t;
  t.name = name;
  t.shape = {m.rows(), m.cols()};
  t.data.assign(m.data(), m.data() + m.size());
  return t;
}

NamedTensor from_vector(const std::string& name, const Vector& v) {
  NamedTensor t;
  t.name = name;
  t.shape = {v.size()};
  t.data = v;
  return t;
}

Matrix to_matrix(const NamedTensor& t) {
  if (t.shape.size() != 2) throw std::runtime_error("checkpoint: tensor " + t.name + " is not a matrix");
  Matrix m(t.shape[0], t.shape[1]);
  std::copy(t.data.begin(), t.data.end(), m.data());
  return m;
}

}  // namespace

void save_checkpoint(const ToyTransformer& model, const std::string& path,
                     const nlohmann::ordered_json& metadata) {
  CheckpointData data;
  data.kind = "model";
  data.config = model_config_to_json(model.config);
  data.metadata = metadata;
  data.metadata["vocab"] = model.vocab.tokens();

  data.tensors.push_back(from_matrix("embedding", model.embedding));
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    const LayerParams& p = model.layers[l];
    data.tensors.push_back(from_matrix(prefix + "wq", p.wq));
    data.tensors.push_back(from_matrix(prefix + "wk", p.wk));
    data.tensors.push_back(from_matrix(prefix + "wv", p.wv));
    data.tensors.push_back(from_matrix(prefix + "wo", p.wo));
    data.tensors.push_back(from_matrix(prefix + "ffn_key", p.ffn_key));
    data.tensors.push_back(from_matrix(prefix + "ffn_value", p.ffn_value));
    data.tensors.push_back(from_vector(prefix + "attn_norm", p.attn_norm));
    data.tensors.push_back(from_vector(prefix + "ffn_norm", p.ffn_norm));
  }
  data.tensors.push_back(from_vector("final_norm", model.final_norm));
  write_checkpoint_file(path, data);
}

ToyTransformer load_checkpoint(const std::string& path) {
  CheckpointData data = read_checkpoint_file(path);
  if (data.kind != "model") {
    throw std::runtime_error("load_checkpoint: " + path + " is not a model checkpoint");
  }
  ToyTransformer model;
  model.config = model_config_from_json(data.config);
  model.config.validate();

  std::size_t idx = 0;
  auto next = [&](const std::string& name) -> const NamedTensor& {
    if (idx >= data.tensors.size()) throw std::runtime_error("load_checkpoint: missing tensor " + name);
    const NamedTensor& t = data.tensors[idx++];
    if (t.name != name) throw std::runtime_error("load_checkpoint: expected tensor " + name + ", found " + t.name);
    return t;
  };

  model.embedding = to_matrix(next("embedding"));
  model.layers.resize(static_cast<std::size_t>(model.config.n_layers));
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    LayerParams& p = model.layers[l];
    p.wq = to_matrix(next(prefix + "wq"));
    p.wk = to_matrix(next(prefix + "wk"));
    p.wv = to_matrix(next(prefix + "wv"));
    p.wo = to_matrix(next(prefix + "wo"));
    p.ffn_key = to_matrix(next(prefix + "ffn_key"));
    p.ffn_value = to_matrix(next(prefix + "ffn_value"));
    p.attn_norm = next(prefix + "attn_norm").data;
    p.ffn_norm = next(prefix + "ffn_norm").data;
  }
  model.final_norm = next("final_norm").data;
  if (idx != data.tensors.size()) throw std::runtime_error("load_checkpoint: unexpected extra tensors");

  if (data.metadata.contains("vocab")) {
    auto tokens = data.metadata.at("vocab").get<std::vector<std::string>>();
    if (!tokens.empty()) model.vocab = Vocab::from_tokens(std::move(tokens));
  }
  if (model.vocab.size() != 0 && model.vocab.size() != model.config.vocab_size) {
    throw std::runtime_error("load_checkpoint: vocab size disagrees with config in " + path);
  }

  const auto d = static_cast<std::size_t>(model.config.d_model);
  const auto dm = static_cast<std::size_t>(model.config.d_ffn);
  const auto v = static_cast<std::size_t>(model.config.vocab_size);
  if (model.embedding.rows() != v || model.embedding.cols() != d) {
    throw std::runtime_error("load_checkpoint: embedding shape mismatch");
  }
  for (const auto& p : model.layers) {
    if (p.wq.rows() != d || p.ffn_key.rows() != dm || p.ffn_key.cols() != d ||
        p.ffn_value.rows() != dm || p.attn_norm.size() != d) {
      throw std::runtime_error("load_checkpoint: layer shape mismatch");
    }
  }
  return model;
}

nlohmann::ordered_json checkpoint_metadata(const std::string& path) {
  return read_checkpoint_file(path).metadata;
}

}  // namespace pmlab
