#include "condenser/checkpoint.hpp"

#include <unordered_map>

#include "condenser/config.hpp"
#include "condenser/io_util.hpp"

namespace condenser {

using nlohmann::json;

namespace {

constexpr std::string_view kCheckpointMagic = "CDSRCKPT";
constexpr std::string_view kStateMagic = "CDSRSTAT";
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint32_t kStateVersion = 1;

ModelKind kind_from_u32(std::uint32_t v, const io::ByteReader& r) {
  if (v > static_cast<std::uint32_t>(ModelKind::kMlm)) r.fail("unknown model kind " + std::to_string(v));
  return static_cast<ModelKind>(v);
}

json parse_header(std::string_view text, const io::ByteReader& r) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    r.fail(std::string("bad header: ") + e.what());
  }
  return {};
}

template <typename Fn>
void table_into(const Checkpoint& ck, const ParameterList& params, Fn&& on_missing) {
  std::unordered_map<std::string, const StoredTensor*> by_name;
  for (const auto& t : ck.tensors) by_name[t.name] = &t;
  for (const auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) {
      on_missing(p.name);
      continue;
    }
    if (it->second->shape != p.tensor.shape())
      throw FormatError("checkpoint tensor '" + p.name + "' has shape " + shape_str(it->second->shape) +
                        ", model expects " + shape_str(p.tensor.shape()));
    Tensor t = p.tensor;
    auto dst = t.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<double>(it->second->values[i]);
  }
}

Checkpoint from_parameters(ModelKind kind, const ModelConfig& config, const ParameterList& params,
                           json metadata) {
  Checkpoint ck;
  ck.kind = kind;
  ck.config = config;
  ck.metadata = std::move(metadata);
  for (const auto& p : params) {
    StoredTensor t{p.name, p.tensor.shape(), {}};
    t.values.reserve(p.tensor.numel());
    for (double v : p.tensor.data()) t.values.push_back(static_cast<float>(v));
    ck.tensors.push_back(std::move(t));
  }
  return ck;
}

}  // namespace

const StoredTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

Checkpoint make_checkpoint(const PretrainModel& model, json metadata) {
  return from_parameters(model.kind(), model.config(), model.parameters(), std::move(metadata));
}

Checkpoint make_checkpoint(const Encoder& encoder, json metadata) {
  return from_parameters(ModelKind::kEncoderOnly, encoder.config(), encoder.parameters(),
                         std::move(metadata));
}

std::string serialize_checkpoint(const Checkpoint& ck) {
  io::ByteWriter w;
  w.raw(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ck.kind));
  const std::string header = json{{"config", ck.config}, {"metadata", ck.metadata}}.dump();
  w.u64(header.size());
  w.raw(header);
  w.u64(ck.tensors.size());
  for (const auto& t : ck.tensors) {
    if (t.values.size() != shape_numel(t.shape))
      throw ShapeError("checkpoint tensor '" + t.name + "' has " + std::to_string(t.values.size()) +
                       " values for shape " + shape_str(t.shape));
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.u64(d);
    for (float v : t.values) w.f32(v);
  }
  return w.bytes();
}

Checkpoint parse_checkpoint(std::string_view bytes, const std::string& context) {
  io::ByteReader r(bytes, context);
  if (r.raw(kCheckpointMagic.size()) != kCheckpointMagic) r.fail("not a checkpoint file");
  const auto version = r.u32();
  if (version != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.kind = kind_from_u32(r.u32(), r);
  const auto header_len = r.u64();
  if (header_len > r.remaining()) r.fail("truncated header");
  auto header = parse_header(r.raw(header_len), r);
  try {
    ck.config = header.at("config").get<ModelConfig>();
    ck.metadata = header.at("metadata");
  } catch (const std::exception& e) {
    r.fail(std::string("bad header: ") + e.what());
  }
  const auto count = r.u64();
  if (count > r.remaining()) r.fail("truncated tensor table");
  ck.tensors.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name = r.str();
    const auto rank = r.u32();
    if (rank > 8) r.fail("tensor '" + t.name + "' has implausible rank " + std::to_string(rank));
    std::uint64_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto dim = r.u64();
      if (dim != 0 && numel > r.remaining() / dim) r.fail("truncated payload of '" + t.name + "'");
      numel *= dim;
      t.shape.push_back(dim);
    }
    if (numel > r.remaining() / 4) r.fail("truncated payload of '" + t.name + "'");
    t.values.resize(numel);
    for (auto& v : t.values) v = r.f32();
    ck.tensors.push_back(std::move(t));
  }
  r.expect_end();
  return ck;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  io::write_atomic(path, serialize_checkpoint(checkpoint));
}

void save_checkpoint(const PretrainModel& model, const std::filesystem::path& path, json metadata) {
  save_checkpoint(make_checkpoint(model, std::move(metadata)), path);
}

void save_checkpoint(const Encoder& encoder, const std::filesystem::path& path, json metadata) {
  save_checkpoint(make_checkpoint(encoder, std::move(metadata)), path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(io::read_file(path), path.string());
}

Encoder encoder_from_checkpoint(const Checkpoint& ck) {
  Encoder encoder(ck.config, 0);
  table_into(ck, encoder.parameters(), [](const std::string& name) {
    throw FormatError("checkpoint lacks encoder tensor '" + name + "'");
  });
  return encoder;
}

PretrainModel pretrain_model_from_checkpoint(const Checkpoint& ck) {
  if (ck.kind == ModelKind::kEncoderOnly)
    throw Error("an encoder-only checkpoint cannot be loaded as a pre-training model");
  PretrainModel model(ck.config, ck.kind, 0);
  const auto params = model.parameters();
  if (params.size() != ck.tensors.size())
    throw FormatError("checkpoint holds " + std::to_string(ck.tensors.size()) + " tensors, " +
                      to_string(ck.kind) + " model has " + std::to_string(params.size()));
  table_into(ck, params, [](const std::string& name) {
    throw FormatError("checkpoint lacks tensor '" + name + "'");
  });
  return model;
}

Encoder load_encoder(const std::filesystem::path& path) {
  return encoder_from_checkpoint(load_checkpoint(path));
}

PretrainModel load_pretrain_model(const std::filesystem::path& path) {
  return pretrain_model_from_checkpoint(load_checkpoint(path));
}

void save_train_state(const TrainState& s, const std::filesystem::path& path) {
  if (s.names.size() != s.parameters.size()) throw Error("train state: names and tensors differ in count");
  io::ByteWriter w;
  w.raw(kStateMagic);
  w.u32(kStateVersion);
  w.u32(static_cast<std::uint32_t>(s.kind));
  const std::string header = json{{"config", s.config}, {"options", s.options}}.dump();
  w.u64(header.size());
  w.raw(header);
  w.u64(s.step);
  w.u64(s.parameters.size());
  for (std::size_t i = 0; i < s.parameters.size(); ++i) {
    w.str(s.names[i]);
    w.u64(s.parameters[i].size());
    for (double v : s.parameters[i]) w.f64(v);
  }
  w.u64(static_cast<std::uint64_t>(s.optimizer.step));
  w.u64(s.optimizer.first_moment.size());
  for (std::size_t i = 0; i < s.optimizer.first_moment.size(); ++i) {
    const auto& m = s.optimizer.first_moment[i];
    const auto& v = s.optimizer.second_moment.at(i);
    w.u64(m.size());
    for (double x : m) w.f64(x);
    for (double x : v) w.f64(x);
  }
  io::write_atomic(path, w.bytes());
}

TrainState load_train_state(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader r(bytes, path.string());
  if (r.raw(kStateMagic.size()) != kStateMagic) r.fail("not a training-state file");
  if (r.u32() != kStateVersion) r.fail("unsupported training-state version");
  TrainState s;
  s.kind = kind_from_u32(r.u32(), r);
  const auto header_len = r.u64();
  if (header_len > r.remaining()) r.fail("truncated header");
  auto header = parse_header(r.raw(header_len), r);
  try {
    s.config = header.at("config").get<ModelConfig>();
    s.options = header.at("options").get<PretrainOptions>();
  } catch (const std::exception& e) {
    r.fail(std::string("bad header: ") + e.what());
  }
  s.step = r.u64();
  auto read_doubles = [&](std::uint64_t n) {
    if (n > r.remaining() / 8) r.fail("truncated values");
    std::vector<double> out(n);
    for (auto& v : out) v = r.f64();
    return out;
  };
  const auto count = r.u64();
  if (count > r.remaining()) r.fail("truncated parameter table");
  for (std::uint64_t i = 0; i < count; ++i) {
    s.names.push_back(r.str());
    s.parameters.push_back(read_doubles(r.u64()));
  }
  s.optimizer.step = static_cast<std::int64_t>(r.u64());
  const auto moments = r.u64();
  if (moments > r.remaining()) r.fail("truncated optimizer state");
  for (std::uint64_t i = 0; i < moments; ++i) {
    const auto n = r.u64();
    s.optimizer.first_moment.push_back(read_doubles(n));
    s.optimizer.second_moment.push_back(read_doubles(n));
  }
  r.expect_end();
  return s;
}

}  // namespace condenser
