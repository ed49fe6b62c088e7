#include <bit>
#include <cstdio>
#include <fstream>
#include <iterator>

#include "adatsc/trainkit.hpp"
#include "json.hpp"

namespace adatsc::trainkit {

namespace {

constexpr char kMagic[4] = {'A', 'D', 'T', 'C'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : b_(bytes) {}
  const char* take(std::size_t n) {
    if (b_.size() - pos_ < n) throw CheckpointError("checkpoint truncated");
    const char* p = b_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(u(4)); }
  std::uint64_t u64() { return u(8); }
  bool done() const { return pos_ == b_.size(); }

 private:
  std::uint64_t u(int n) {
    const char* p = take(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return v;
  }
  const std::string& b_;
  std::size_t pos_ = 0;
};

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

void save_checkpoint(const Model& m, const std::string& path) {
  nlohmann::ordered_json meta;
  meta["cfg"] = nlohmann::ordered_json::parse(config_to_json(m.cfg));
  meta["cfg_hash"] = hex(config_hash(m.cfg));
  meta["state"] = {{"channels", m.channels},       {"steps", m.steps}, {"height", m.height},
                   {"width", m.width},             {"n_sequences", m.n_sequences},
                   {"epoch", m.epoch},             {"centers_ready", m.centers_ready}};
  const std::string header = meta.dump();

  std::string out(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  put_u32(out, static_cast<std::uint32_t>(m.params.size()));
  for (const auto& e : m.params.entries()) {
    put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    const auto& v = e.var.value();
    put_u32(out, static_cast<std::uint32_t>(v.rank()));
    for (auto d : v.shape()) put_u64(out, static_cast<std::uint64_t>(d));
    for (float f : v.values()) put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw CheckpointError("write failed for " + path);
}

LoadedModel load_checkpoint(const std::string& path, const TrainConfig* expected) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path);
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(bytes);
  if (std::string(r.take(4), 4) != std::string(kMagic, 4)) throw CheckpointError(path + " is not a checkpoint");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint version " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  const std::uint32_t hlen = r.u32();
  nlohmann::json meta;
  TrainConfig cfg;
  try {
    meta = nlohmann::json::parse(std::string(r.take(hlen), hlen));
    cfg = config_from_json(meta.at("cfg").dump());
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }

  LoadedModel out;
  if (meta.value("cfg_hash", std::string()) != hex(config_hash(cfg)))
    out.warnings.push_back("stored config hash does not match the stored config");
  if (expected && config_hash(*expected) != config_hash(cfg))
    out.warnings.push_back("checkpoint config differs from the requested config");

  try {
    const auto& s = meta.at("state");
    out.model = Model::create(cfg, s.at("channels").get<int>(), s.at("steps").get<std::int64_t>(),
                              s.at("height").get<std::int64_t>(), s.at("width").get<std::int64_t>(),
                              s.at("n_sequences").get<int>());
    out.model.epoch = s.at("epoch").get<int>();
    out.model.centers_ready = s.at("centers_ready").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint state: ") + e.what());
  }

  const std::uint32_t count = r.u32();
  if (count != out.model.params.size())
    throw CheckpointError("checkpoint holds " + std::to_string(count) + " tensors, model has " +
                          std::to_string(out.model.params.size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t nlen = r.u32();
    const std::string name(r.take(nlen), nlen);
    if (!out.model.params.contains(name)) throw CheckpointError("unknown tensor " + name);
    auto var = out.model.params.get(name);
    auto& value = var.mutable_value();
    const std::uint32_t rank = r.u32();
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<std::int64_t>(r.u64()));
    if (shape != value.shape())
      throw CheckpointError("tensor " + name + " has shape " + to_string(shape) + ", model expects " +
                            to_string(value.shape()));
    for (auto& v : value.values()) v = std::bit_cast<float>(r.u32());
  }
  if (!r.done()) throw CheckpointError("trailing bytes after the parameter table");
  return out;
}

}  // namespace adatsc::trainkit
