#include "rmx/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <set>
#include <sstream>

namespace rmx {

namespace {

constexpr char kMagic[8] = {'R', 'M', 'X', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint8_t kDtypeF64 = 1;

template <typename U>
void put_uint(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t end, std::string origin)
      : bytes_(bytes), end_(end), origin_(std::move(origin)) {}

  template <typename U>
  U uint(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  std::string text(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == end_; }
  [[noreturn]] void fail(const std::string& m) const { throw IoError(origin_ + ": " + m); }

 private:
  void need(std::size_t n, const char* what) {
    if (end_ - pos_ < n) fail(std::string("truncated checkpoint while reading ") + what);
  }
  const std::string& bytes_;
  std::size_t pos_ = 0, end_;
  std::string origin_;
};

std::int64_t numel_of(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

}  // namespace

std::uint64_t fnv1a64(const char* data, std::size_t size) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ull;
  }
  return h;
}

const CheckpointRecord* Checkpoint::find(const std::string& name) const {
  for (const auto& r : records)
    if (r.name == name) return &r;
  return nullptr;
}

const CheckpointRecord& Checkpoint::at(const std::string& name) const {
  if (const auto* r = find(name)) return *r;
  throw IoError("checkpoint has no record '" + name + "'");
}

void Checkpoint::put(std::string name, Shape shape, std::vector<double> values) {
  if (numel_of(shape) != static_cast<std::int64_t>(values.size()))
    throw ShapeError("checkpoint record '" + name + "': shape " + shape_str(shape) + " does not match value count");
  for (auto& r : records)
    if (r.name == name) {
      r.shape = std::move(shape);
      r.values = std::move(values);
      return;
    }
  records.push_back({std::move(name), std::move(shape), std::move(values)});
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, sizeof(kMagic));
  put_uint<std::uint32_t>(out, kCheckpointVersion);
  put_uint<std::uint64_t>(out, ckpt.config_text.size());
  out += ckpt.config_text;
  put_uint<std::uint64_t>(out, ckpt.records.size());
  for (const auto& r : ckpt.records) {
    put_uint<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
    out += r.name;
    out.push_back(static_cast<char>(kDtypeF64));
    put_uint<std::uint32_t>(out, static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) put_uint<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    for (double v : r.values) put_uint<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  put_uint<std::uint64_t>(out, fnv1a64(out.data(), out.size()));
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin) {
  if (bytes.size() < sizeof(kMagic) + 8 || bytes.compare(0, sizeof(kMagic), kMagic, sizeof(kMagic)) != 0)
    throw IoError(origin + ": not a checkpoint (bad magic)");
  const std::size_t body = bytes.size() - 8;
  Reader tail(bytes, bytes.size(), origin);
  tail.text(body, "body");
  const auto stored = tail.uint<std::uint64_t>("checksum");
  if (stored != fnv1a64(bytes.data(), body)) throw IoError(origin + ": checksum mismatch (file corrupted)");

  Reader in(bytes, body, origin);
  in.text(sizeof(kMagic), "magic");
  const auto version = in.uint<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    in.fail("unsupported checkpoint version " + std::to_string(version) + " (expected " +
            std::to_string(kCheckpointVersion) + ")");
  Checkpoint ckpt;
  ckpt.config_text = in.text(in.uint<std::uint64_t>("config length"), "config");
  const auto count = in.uint<std::uint64_t>("record count");
  std::set<std::string> seen;
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointRecord r;
    r.name = in.text(in.uint<std::uint32_t>("name length"), "name");
    if (!seen.insert(r.name).second) in.fail("duplicate record '" + r.name + "'");
    const auto dtype = in.text(1, "dtype");
    if (static_cast<std::uint8_t>(dtype[0]) != kDtypeF64) in.fail("record '" + r.name + "': unsupported dtype");
    const auto rank = in.uint<std::uint32_t>("rank");
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto e = in.uint<std::uint64_t>("extent");
      r.shape.push_back(static_cast<std::int64_t>(e));
      n *= e;
    }
    if (n > body / 8) in.fail("record '" + r.name + "' larger than the file");
    r.values.resize(n);
    for (auto& v : r.values) v = std::bit_cast<double>(in.uint<std::uint64_t>("values"));
    ckpt.records.push_back(std::move(r));
  }
  if (!in.done()) in.fail("trailing bytes after the last record");
  return ckpt;
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::string bytes = encode_checkpoint(ckpt);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + tmp + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed for '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("cannot rename '" + tmp + "' to '" + path + "'");
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_checkpoint(ss.str(), path);
}

Checkpoint capture_model(Model& model) {
  Checkpoint ckpt;
  ckpt.config_text = model.config().to_text();
  model.visit(Visitor{
      [&](const std::string& n, Tensor& t) { ckpt.put(n, t.shape(), {t.data().begin(), t.data().end()}); },
      [&](const std::string& n, RunningStats& s) {
        ckpt.put(n + ".running_mean", {static_cast<std::int64_t>(s.mean.size())}, s.mean);
        ckpt.put(n + ".running_var", {static_cast<std::int64_t>(s.var.size())}, s.var);
      }});
  return ckpt;
}

void restore_model(Model& model, const Checkpoint& ckpt) {
  auto fetch = [&](const std::string& n, const Shape& shape) -> const CheckpointRecord& {
    const auto& r = ckpt.at(n);
    if (r.shape != shape)
      throw IoError("checkpoint record '" + n + "' has shape " + shape_str(r.shape) + ", model expects " +
                    shape_str(shape));
    return r;
  };
  model.visit(Visitor{[&](const std::string& n, Tensor& t) {
                        const auto& r = fetch(n, t.shape());
                        std::copy(r.values.begin(), r.values.end(), t.data().begin());
                      },
                      [&](const std::string& n, RunningStats& s) {
                        const Shape shape{static_cast<std::int64_t>(s.mean.size())};
                        s.mean = fetch(n + ".running_mean", shape).values;
                        s.var = fetch(n + ".running_var", shape).values;
                      }});
}

Model load_model(const Checkpoint& ckpt) {
  Model m(ModelConfig::parse(ckpt.config_text));
  restore_model(m, ckpt);
  return m;
}

}  // namespace rmx
