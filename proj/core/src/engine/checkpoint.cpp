#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "spotter/engine.hpp"

namespace spotter {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'T', 'F', 'C', 'K'};
constexpr std::uint32_t kMaxNameLength = 4096;
constexpr std::uint32_t kMaxRank = 8;

template <typename V>
void put(std::ostream& out, V value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(V));
}

class Reader {
 public:
  Reader(std::istream& in, const fs::path& path) : in_(in), path_(path) {}

  template <typename V>
  V get(const char* what) {
    V value{};
    in_.read(reinterpret_cast<char*>(&value), sizeof(V));
    if (in_.gcount() != static_cast<std::streamsize>(sizeof(V))) fail(std::string("truncated while reading ") + what);
    return value;
  }

  std::string bytes(std::size_t n, const char* what) {
    std::string s(n, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(n));
    if (in_.gcount() != static_cast<std::streamsize>(n)) fail(std::string("truncated while reading ") + what);
    return s;
  }

  [[noreturn]] void fail(const std::string& reason) const {
    throw CheckpointError(path_.string() + ": " + reason);
  }

 private:
  std::istream& in_;
  fs::path path_;
};

}  // namespace

void write_checkpoint_file(const fs::path& path, const CheckpointFile& file) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(tmp.string() + ": cannot open for writing");
    out.write(kMagic, 4);
    put<std::uint32_t>(out, file.version);
    put<std::uint64_t>(out, file.iteration);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(file.records.size()));
    for (const auto& r : file.records) {
      if (static_cast<std::size_t>(diff::numel(r.shape)) != r.values.size()) {
        throw CheckpointError("record " + r.name + " has a payload that does not match its shape");
      }
      put<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
      out.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
      put<std::uint32_t>(out, static_cast<std::uint32_t>(r.shape.size()));
      for (int e : r.shape) put<std::uint32_t>(out, static_cast<std::uint32_t>(e));
      out.write(reinterpret_cast<const char*>(r.values.data()),
                static_cast<std::streamsize>(r.values.size() * sizeof(float)));
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(file.config_json.size()));
    out.write(file.config_json.data(), static_cast<std::streamsize>(file.config_json.size()));
    if (!out) throw CheckpointError(tmp.string() + ": write failed");
  }
  fs::rename(tmp, path);
}

CheckpointFile read_checkpoint_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(path.string() + ": cannot open");
  Reader reader(in, path);
  CheckpointFile file;
  if (reader.bytes(4, "magic") != std::string(kMagic, 4)) reader.fail("bad magic (expected TFCK)");
  file.version = reader.get<std::uint32_t>("version");
  if (file.version != kCheckpointVersion) {
    reader.fail("unsupported format version " + std::to_string(file.version));
  }
  file.iteration = reader.get<std::uint64_t>("iteration");
  const auto count = reader.get<std::uint32_t>("record count");
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointRecord r;
    const auto name_len = reader.get<std::uint32_t>("name length");
    if (name_len == 0 || name_len > kMaxNameLength) reader.fail("implausible record name length");
    r.name = reader.bytes(name_len, "record name");
    const auto rank = reader.get<std::uint32_t>("rank");
    if (rank > kMaxRank) reader.fail("implausible rank for record " + r.name);
    std::size_t total = 1;
    for (std::uint32_t a = 0; a < rank; ++a) {
      const auto e = reader.get<std::uint32_t>("extent");
      if (e == 0 || e > (1u << 28)) reader.fail("implausible extent for record " + r.name);
      r.shape.push_back(static_cast<int>(e));
      total *= e;
      if (total > (std::size_t{1} << 32)) reader.fail("record " + r.name + " is too large");
    }
    const std::string payload = reader.bytes(total * sizeof(float), "payload");
    r.values.resize(total);
    std::memcpy(r.values.data(), payload.data(), payload.size());
    file.records.push_back(std::move(r));
  }
  const auto json_len = reader.get<std::uint32_t>("config length");
  file.config_json = reader.bytes(json_len, "config");
  char extra;
  if (in.get(extra)) reader.fail("trailing bytes after config");
  return file;
}

void save_checkpoint(const fs::path& path, const TrainState& state) {
  CheckpointFile file;
  file.iteration = static_cast<std::uint64_t>(state.iteration);
  file.config_json = state.config.to_json();
  const auto& params = state.model->parameters().all();
  const auto& m = state.optimizer.first_moments();
  const auto& v = state.optimizer.second_moments();
  for (const auto& p : params) {
    const auto vals = p.tensor.values();
    file.records.push_back({p.name, p.tensor.shape(), std::vector<float>(vals.begin(), vals.end())});
  }
  for (std::size_t i = 0; i < params.size() && i < m.size(); ++i) {
    file.records.push_back({"adam_m/" + params[i].name, params[i].tensor.shape(), m[i]});
    file.records.push_back({"adam_v/" + params[i].name, params[i].tensor.shape(), v[i]});
  }
  write_checkpoint_file(path, file);
}

TrainState load_checkpoint(const fs::path& path) {
  const CheckpointFile file = read_checkpoint_file(path);
  TrainState state;
  try {
    state.config = TrainConfig::from_json(file.config_json);
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(path.string() + ": config echo is invalid: " + e.what());
  }
  state = init_training(state.config);
  state.iteration = static_cast<std::int64_t>(file.iteration);
  state.optimizer.set_steps(state.iteration);

  std::map<std::string, const CheckpointRecord*> by_name;
  for (const auto& r : file.records) {
    if (!by_name.emplace(r.name, &r).second) throw CheckpointError(path.string() + ": duplicate record " + r.name);
  }
  auto& params = state.model->parameters().all();
  auto& m = state.optimizer.first_moments();
  auto& v = state.optimizer.second_moments();
  auto fetch = [&](const std::string& name, const diff::Shape& shape) -> const CheckpointRecord* {
    const auto it = by_name.find(name);
    if (it == by_name.end()) return nullptr;
    if (it->second->shape != shape) {
      throw CheckpointError(path.string() + ": record " + name + " has shape " + diff::to_string(it->second->shape) +
                            ", model expects " + diff::to_string(shape));
    }
    return it->second;
  };
  std::size_t used = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& shape = params[i].tensor.shape();
    const CheckpointRecord* rec = fetch(params[i].name, shape);
    if (!rec) throw CheckpointError(path.string() + ": missing parameter " + params[i].name);
    auto dst = params[i].tensor.mutable_values();
    std::copy(rec->values.begin(), rec->values.end(), dst.begin());
    ++used;
    if (const auto* rm = fetch("adam_m/" + params[i].name, shape)) {
      m[i] = rm->values;
      ++used;
    }
    if (const auto* rv = fetch("adam_v/" + params[i].name, shape)) {
      v[i] = rv->values;
      ++used;
    }
  }
  if (used != file.records.size()) throw CheckpointError(path.string() + ": contains records the model does not use");
  return state;
}

}  // namespace spotter
