#include "parattn/checkpoint.hpp"

#include "parattn/errors.hpp"

#include <json.hpp>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace parattn {

using nlohmann::json;

namespace {

constexpr std::array<char, 8> kMagic{'P', 'A', 'T', 'N', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
void put(std::string& buf, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  buf.append(bytes, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& data, std::string path) : data_(data), path_(std::move(path)) {}

  template <typename T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }

  const char* take(std::size_t n) {
    if (n > data_.size() - pos_) throw FormatError("checkpoint " + path_ + " is truncated");
    const char* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  const std::string& data_;
  std::string path_;
  std::size_t pos_ = 0;
};

json config_to_json(const ModelConfig& c) {
  return {{"variant", to_string(c.variant)},
          {"branches", c.branches},
          {"branch_depth", c.branch_depth},
          {"decoder_depth", c.decoder_depth},
          {"d_model", c.d_model},
          {"d_ff", c.d_ff},
          {"heads", c.heads},
          {"max_len", c.max_len},
          {"src_vocab", c.src_vocab},
          {"tgt_vocab", c.tgt_vocab},
          {"seed", c.seed},
          {"count_includes_final", c.count_includes_final},
          {"apa_output_norm", c.apa_output_norm},
          {"workers", c.workers}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.branches = j.at("branches").get<int>();
  c.branch_depth = j.at("branch_depth").get<int>();
  c.decoder_depth = j.at("decoder_depth").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.heads = j.at("heads").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.src_vocab = j.at("src_vocab").get<int>();
  c.tgt_vocab = j.at("tgt_vocab").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.count_includes_final = j.at("count_includes_final").get<bool>();
  c.apa_output_norm = j.at("apa_output_norm").get<bool>();
  c.workers = j.at("workers").get<int>();
  return c;
}

json shape(const std::string& name, const Matrix& m) {
  return {{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}};
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const TransformerModel& model,
                     const Vocabulary& src_vocab, const Vocabulary& tgt_vocab,
                     const TrainState& state) {
  const auto params = model.parameters();
  const bool has_moments = !state.adam.m.empty();
  if (has_moments && (state.adam.m.size() != params.size() || state.adam.v.size() != params.size()))
    throw DimensionError("save_checkpoint: optimizer state does not match parameter list");

  json header;
  header["config"] = config_to_json(model.config());
  header["src_vocab"] = src_vocab.tokens();
  header["tgt_vocab"] = tgt_vocab.tokens();
  const auto& o = state.adam.options;
  header["adam"] = {{"lr", o.lr}, {"beta1", o.beta1}, {"beta2", o.beta2}, {"eps", o.eps},
                    {"step", state.adam.step}, {"has_moments", has_moments}};
  header["epochs_done"] = state.epochs_done;
  json epochs = json::array();
  for (const auto& e : state.report.epochs)
    epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss},
                      {"val_bleu", e.val_bleu}, {"seconds", e.seconds}});
  header["report"] = {{"epochs", epochs}, {"total_seconds", state.report.total_seconds}};

  std::string payload;
  json tensors = json::array();
  auto add = [&](const std::string& name, const Matrix& m) {
    tensors.push_back(shape(name, m));
    for (Index r = 0; r < m.rows(); ++r)
      for (Index c = 0; c < m.cols(); ++c) put(payload, m(r, c));
  };
  for (const auto* p : params) add(p->name, p->value);
  if (has_moments) {
    for (std::size_t i = 0; i < params.size(); ++i) add(params[i]->name + ".adam_m", state.adam.m[i]);
    for (std::size_t i = 0; i < params.size(); ++i) add(params[i]->name + ".adam_v", state.adam.v[i]);
  }
  header["tensors"] = tensors;

  const std::string text = header.dump();
  std::string out(kMagic.begin(), kMagic.end());
  put(out, kCheckpointVersion);
  put(out, static_cast<std::uint64_t>(text.size()));
  out += text;
  put(out, static_cast<std::uint64_t>(payload.size() / sizeof(double)));
  out += payload;
  put(out, fnv1a(payload.data(), payload.size()));

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw FormatError("cannot write checkpoint " + path.string());
    os.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!os) throw FormatError("short write to checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  const std::string data((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  Reader r(data, path.string());

  if (std::memcmp(r.take(kMagic.size()), kMagic.data(), kMagic.size()) != 0)
    throw FormatError(path.string() + " is not a checkpoint");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint " + path.string() + " has version " + std::to_string(version) +
                      ", expected " + std::to_string(kCheckpointVersion));
  const auto header_len = r.get<std::uint64_t>();
  if (header_len > r.remaining()) throw FormatError("checkpoint " + path.string() + " is truncated");
  json header;
  try {
    header = json::parse(std::string(r.take(header_len), header_len));
  } catch (const json::exception& e) {
    throw FormatError("checkpoint " + path.string() + ": bad header: " + e.what());
  }
  const auto count = r.get<std::uint64_t>();
  if (count > r.remaining() / sizeof(double))
    throw FormatError("checkpoint " + path.string() + " is truncated");
  const char* payload = r.take(count * sizeof(double));
  const auto hash = r.get<std::uint64_t>();
  if (r.remaining() != 0) throw FormatError("checkpoint " + path.string() + " has trailing bytes");
  if (hash != fnv1a(payload, count * sizeof(double)))
    throw FormatError("checkpoint " + path.string() + " failed its integrity check");

  try {
    ModelConfig config = config_from_json(header.at("config"));
    Checkpoint ck{TransformerModel(config),
                  Vocabulary::from_tokens(header.at("src_vocab").get<std::vector<std::string>>()),
                  Vocabulary::from_tokens(header.at("tgt_vocab").get<std::vector<std::string>>()),
                  {}};
    const json& adam = header.at("adam");
    ck.state.adam.options = {adam.at("lr").get<double>(), adam.at("beta1").get<double>(),
                             adam.at("beta2").get<double>(), adam.at("eps").get<double>()};
    ck.state.adam.step = adam.at("step").get<long long>();
    const bool has_moments = adam.at("has_moments").get<bool>();
    ck.state.epochs_done = header.at("epochs_done").get<int>();
    for (const auto& e : header.at("report").at("epochs"))
      ck.state.report.epochs.push_back({e.at("epoch").get<int>(), e.at("train_loss").get<double>(),
                                        e.at("val_loss").get<double>(), e.at("val_bleu").get<double>(),
                                        e.at("seconds").get<double>()});
    ck.state.report.total_seconds = header.at("report").at("total_seconds").get<double>();

    auto params = ck.model.parameters();
    const json& tensors = header.at("tensors");
    const std::size_t expected = params.size() * (has_moments ? 3 : 1);
    if (tensors.size() != expected)
      throw FormatError("checkpoint " + path.string() + " lists " + std::to_string(tensors.size()) +
                        " tensors, model needs " + std::to_string(expected));
    std::uint64_t offset = 0;
    auto read_into = [&](std::size_t k, Matrix& m, const Matrix& like) {
      const json& t = tensors[k];
      const Index rows = t.at("rows").get<Index>();
      const Index cols = t.at("cols").get<Index>();
      if (rows != like.rows() || cols != like.cols())
        throw FormatError("checkpoint " + path.string() + ": tensor " + t.at("name").get<std::string>() +
                          " has shape " + std::to_string(rows) + "x" + std::to_string(cols));
      const std::uint64_t n = static_cast<std::uint64_t>(rows * cols);
      if (offset + n > count) throw FormatError("checkpoint " + path.string() + " payload too short");
      m.resize(rows, cols);
      for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) {
          std::memcpy(&m(i, j), payload + (offset++) * sizeof(double), sizeof(double));
        }
    };
    for (std::size_t i = 0; i < params.size(); ++i) read_into(i, params[i]->value, params[i]->value);
    if (has_moments) {
      ck.state.adam.m.resize(params.size());
      ck.state.adam.v.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i)
        read_into(params.size() + i, ck.state.adam.m[i], params[i]->value);
      for (std::size_t i = 0; i < params.size(); ++i)
        read_into(2 * params.size() + i, ck.state.adam.v[i], params[i]->value);
    }
    if (offset != count) throw FormatError("checkpoint " + path.string() + " payload size mismatch");
    return ck;
  } catch (const json::exception& e) {
    throw FormatError("checkpoint " + path.string() + ": bad header: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError("checkpoint " + path.string() + ": " + e.what());
  }
}

}  // namespace parattn
