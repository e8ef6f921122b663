#include "tmblock/train/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

namespace tmb::train {

namespace {

constexpr char kMagic[8] = {'T', 'M', 'B', 'C', 'K', 'P', 'T', '\0'};

struct Record {
  std::string name;
  ad::Shape shape;
  std::vector<double> data;
};

std::vector<Record> collect_records(net::Network& net) {
  std::vector<Record> out;
  for (const auto& p : net.parameters()) {
    out.push_back({p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}});
  }
  for (const auto& n : net.norms()) {
    const std::size_t c = n.state->channels();
    out.push_back({n.name + ".running_mean", {c}, n.state->running_mean});
    out.push_back({n.name + ".running_var", {c}, n.state->running_var});
    out.push_back({n.name + ".initialized", {1}, {n.state->stats_initialized ? 1.0 : 0.0}});
  }
  return out;
}

class Writer {
 public:
  template <typename T>
  void pod(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}
  template <typename T>
  T pod(const std::string& what) {
    T v{};
    need(sizeof(T), what);
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void doubles(double* out, std::size_t n, const std::string& what) {
    need(n * sizeof(double), what);
    std::memcpy(out, bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const std::string& what) {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError("checkpoint truncated while reading " + what + " at offset " +
                            std::to_string(pos_));
    }
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

struct Header {
  std::uint64_t seed = 0;
  std::string config;
  std::vector<Record> records;
};

Header parse(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  const std::string magic = r.str(sizeof(kMagic), "magic");
  if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("not a checkpoint (bad magic bytes)");
  }
  const auto version = r.pod<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) +
                          " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  Header h;
  h.seed = r.pod<std::uint64_t>("seed");
  const auto clen = r.pod<std::uint64_t>("config length");
  h.config = r.str(clen, "config");
  const auto count = r.pod<std::uint64_t>("record count");
  for (std::uint64_t i = 0; i < count; ++i) {
    Record rec;
    const auto nlen = r.pod<std::uint32_t>("record " + std::to_string(i) + " name length");
    rec.name = r.str(nlen, "record " + std::to_string(i) + " name");
    const auto rank = r.pod<std::uint32_t>("rank of " + rec.name);
    for (std::uint32_t d = 0; d < rank; ++d) rec.shape.push_back(r.pod<std::uint64_t>("shape of " + rec.name));
    rec.data.resize(ad::shape_numel(rec.shape));
    r.doubles(rec.data.data(), rec.data.size(), "data of " + rec.name);
    h.records.push_back(std::move(rec));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after the last record");
  return h;
}

void apply_records(net::Network& net, const std::vector<Record>& records) {
  const auto expected = collect_records(net);
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (i >= records.size()) throw CheckpointError("missing record " + expected[i].name);
    const auto& got = records[i];
    if (got.name != expected[i].name) {
      throw CheckpointError("record mismatch at position " + std::to_string(i) + ": expected " +
                            expected[i].name + ", found " + got.name);
    }
    if (got.shape != expected[i].shape) {
      throw CheckpointError("record " + got.name + " has shape " + ad::shape_str(got.shape) +
                            ", network expects " + ad::shape_str(expected[i].shape));
    }
  }
  if (records.size() != expected.size()) {
    throw CheckpointError("unexpected extra record " + records[expected.size()].name);
  }
  std::size_t i = 0;
  for (auto& p : net.parameters()) {
    auto dst = p.tensor.mutable_data();
    std::copy(records[i].data.begin(), records[i].data.end(), dst.begin());
    ++i;
  }
  for (auto& n : net.norms()) {
    n.state->running_mean = records[i++].data;
    n.state->running_var = records[i++].data;
    n.state->stats_initialized = records[i++].data[0] != 0.0;
  }
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(net::Network& net) {
  Writer w;
  w.raw(kMagic, sizeof(kMagic));
  w.pod<std::uint32_t>(kCheckpointVersion);
  w.pod<std::uint64_t>(net.seed());
  const std::string config = net.config().to_text();
  w.pod<std::uint64_t>(config.size());
  w.raw(config.data(), config.size());
  const auto records = collect_records(net);
  w.pod<std::uint64_t>(records.size());
  for (const auto& r : records) {
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(r.name.size()));
    w.raw(r.name.data(), r.name.size());
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) w.pod<std::uint64_t>(d);
    w.raw(r.data.data(), r.data.size() * sizeof(double));
  }
  return std::move(w.bytes);
}

void save_checkpoint(net::Network& net, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(net);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

net::Network deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  const auto h = parse(bytes);
  auto net = net::Network::build(net::NetConfig::parse(h.config), h.seed);
  apply_records(net, h.records);
  return net;
}

net::Network load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file(path));
}

void deserialize_checkpoint_into(net::Network& net, const std::vector<std::uint8_t>& bytes) {
  apply_records(net, parse(bytes).records);
}

void load_checkpoint_into(net::Network& net, const std::filesystem::path& path) {
  deserialize_checkpoint_into(net, read_file(path));
}

NetworkState capture_state(net::Network& net) {
  NetworkState s;
  for (const auto& p : net.parameters()) s.params.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  for (const auto& n : net.norms()) {
    s.running_mean.push_back(n.state->running_mean);
    s.running_var.push_back(n.state->running_var);
    s.initialized.push_back(n.state->stats_initialized);
  }
  return s;
}

void restore_state(net::Network& net, const NetworkState& s) {
  std::size_t i = 0;
  for (auto& p : net.parameters()) {
    auto dst = p.tensor.mutable_data();
    std::copy(s.params.at(i).begin(), s.params.at(i).end(), dst.begin());
    ++i;
  }
  i = 0;
  for (auto& n : net.norms()) {
    n.state->running_mean = s.running_mean.at(i);
    n.state->running_var = s.running_var.at(i);
    n.state->stats_initialized = s.initialized.at(i);
    ++i;
  }
}

}  // namespace tmb::train
