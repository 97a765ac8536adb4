#include "cfnet/dataio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cfnet/errors.hpp"
#include "cfnet/rng.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace cfn {

namespace {

constexpr char kMagic[4] = {'C', 'F', 'N', 'T'};
constexpr uint16_t kTensorVersion = 1;
constexpr uint8_t kDtypeF32 = 0;
constexpr uint8_t kDtypeF64 = 1;
constexpr int64_t kMaxElems = int64_t{1} << 33;

void put_u16(std::string& out, uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

// Cursor over a fully buffered file; every read is bounds-checked so short
// files surface as Truncated rather than garbage values.
struct ByteReader {
  const std::string& buf;
  const std::string& path;
  size_t pos = 0;

  void need(size_t n, const char* what) const {
    if (pos + n > buf.size()) {
      throw FormatError(FormatError::Kind::Truncated,
                        "truncated tensor container (" + std::string(what) +
                            "): " + path);
    }
  }
  uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<uint8_t>(buf[pos++]);
  }
  uint16_t u16(const char* what) {
    need(2, what);
    uint16_t v = 0;
    for (int i = 0; i < 2; ++i)
      v |= static_cast<uint16_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
    return v;
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
    return v;
  }
  uint64_t u64(const char* what) {
    need(8, what);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
    return v;
  }
};

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return std::move(ss).str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("cannot open file for writing: " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ConfigError("write failed: " + path);
}

json parse_json(const std::string& text, const std::string& where) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) {
    throw FormatError(FormatError::Kind::Corrupt, "malformed JSON in " + where);
  }
  return j;
}

}  // namespace

void write_tensor(const std::string& path, const Tensor& t, bool as_f32) {
  if (!t.defined()) throw ConfigError("write_tensor: undefined tensor");
  const Shape& shape = t.shape();
  std::string out;
  out.reserve(16 + shape.size() * 4 + static_cast<size_t>(t.numel()) * 8);
  out.append(kMagic, 4);
  put_u16(out, kTensorVersion);
  out.push_back(static_cast<char>(as_f32 ? kDtypeF32 : kDtypeF64));
  out.push_back(static_cast<char>(shape.size()));
  for (int64_t d : shape) {
    if (d <= 0 || d > static_cast<int64_t>(UINT32_MAX)) {
      throw ConfigError("write_tensor: dimension out of range: " + shape_str(shape));
    }
    put_u32(out, static_cast<uint32_t>(d));
  }
  const auto& v = t.values();
  if (as_f32) {
    for (double x : v) put_u32(out, std::bit_cast<uint32_t>(static_cast<float>(x)));
  } else {
    for (double x : v) put_u64(out, std::bit_cast<uint64_t>(x));
  }
  write_file(path, out);
}

Tensor read_tensor(const std::string& path) {
  const std::string buf = read_file(path);
  ByteReader r{buf, path};

  r.need(4, "magic");
  if (std::memcmp(buf.data(), kMagic, 4) != 0) {
    throw FormatError(FormatError::Kind::BadMagic,
                      "not a tensor container (bad magic): " + path);
  }
  r.pos = 4;
  uint16_t version = r.u16("version");
  if (version != kTensorVersion) {
    throw FormatError(FormatError::Kind::BadVersion,
                      "unsupported tensor container version " +
                          std::to_string(version) + " (expected " +
                          std::to_string(kTensorVersion) + "): " + path);
  }
  uint8_t dtype = r.u8("dtype");
  if (dtype != kDtypeF32 && dtype != kDtypeF64) {
    throw FormatError(FormatError::Kind::Corrupt,
                      "unknown dtype code " + std::to_string(dtype) + ": " + path);
  }
  uint8_t ndim = r.u8("ndim");
  Shape shape(ndim);
  int64_t numel = 1;
  for (int i = 0; i < ndim; ++i) {
    uint32_t d = r.u32("dims");
    if (d == 0) {
      throw FormatError(FormatError::Kind::Corrupt, "zero dimension: " + path);
    }
    shape[i] = static_cast<int64_t>(d);
    numel *= shape[i];
    if (numel > kMaxElems) {
      throw FormatError(FormatError::Kind::Corrupt,
                        "implausible element count: " + path);
    }
  }
  std::vector<double> values(static_cast<size_t>(numel));
  if (dtype == kDtypeF32) {
    for (auto& x : values) x = static_cast<double>(std::bit_cast<float>(r.u32("payload")));
  } else {
    for (auto& x : values) x = std::bit_cast<double>(r.u64("payload"));
  }
  if (r.pos != buf.size()) {
    throw FormatError(FormatError::Kind::Corrupt,
                      "trailing bytes after payload: " + path);
  }
  return Tensor(std::move(shape), std::move(values));
}

double class_channel_sign(int64_t cls, int64_t channel) {
  uint64_t h = splitmix64(static_cast<uint64_t>(cls) * 8191ull +
                          static_cast<uint64_t>(channel));
  return (h & 1ull) ? 1.0 : -1.0;
}

namespace {

void validate_synth_spec(const SynthSpec& s) {
  auto bad = [](const std::string& msg) { throw ConfigError("generate: " + msg); };
  if (s.num_clips < 1) bad("num_clips must be >= 1");
  if (s.num_classes < 1) bad("num_classes must be >= 1");
  if (s.T_raw < 1) bad("T_raw must be >= 1");
  if (s.channels < 1 || s.height < 1 || s.width < 1) bad("feature dims must be >= 1");
  if (s.bursts_per_clip < 0 || s.distractors_per_clip < 0) bad("burst counts must be >= 0");
  if (s.dur_lo < 1 || s.dur_lo > s.dur_hi) bad("need 1 <= dur_lo <= dur_hi");
  if (s.dur_hi > s.T_raw) bad("dur_hi exceeds T_raw; bursts must fit inside the clip");
  if (!(s.freq_lo > 0.0) || s.freq_lo > s.freq_hi || s.freq_hi > 0.5) {
    bad("carrier frequencies must satisfy 0 < freq_lo <= freq_hi <= 0.5 cycles/frame");
  }
  if (!(s.distractor_freq > 0.0) || s.distractor_freq > 0.5) {
    bad("distractor_freq must be in (0, 0.5] cycles/frame");
  }
  if (s.noise < 0.0) bad("noise must be >= 0");
  if (s.input_stride < 1) bad("input_stride must be >= 1");
  if (s.T_raw % s.input_stride != 0) bad("T_raw must be a multiple of input_stride");
  if (s.index_offset < 0) bad("index_offset must be >= 0");
}

}  // namespace

std::vector<DetectionClip> generate(const SynthSpec& spec) {
  validate_synth_spec(spec);
  const int64_t C = spec.channels, T = spec.T_raw, H = spec.height, W = spec.width;
  const int64_t K = spec.num_classes;
  const int64_t hw = H * W;
  const double two_pi = 2.0 * std::acos(-1.0);

  std::vector<DetectionClip> clips;
  clips.reserve(static_cast<size_t>(spec.num_clips));

  for (int64_t i = 0; i < spec.num_clips; ++i) {
    const int64_t clip_index = spec.index_offset + i;
    Rng rng = Rng::derive(spec.seed, static_cast<uint64_t>(clip_index));

    std::vector<double> feat = rng.normal_vec(static_cast<size_t>(C * T * hw), 0.0, spec.noise);
    std::vector<double> lab(static_cast<size_t>(K * T), 0.0);

    // Windows are globally disjoint (including distractors), so every labeled
    // frame carries exactly one class and the labeled count is the summed
    // burst duration.
    std::vector<char> used(static_cast<size_t>(T), 0);
    auto place = [&](int64_t dur) -> int64_t {
      for (int attempt = 0; attempt < 200; ++attempt) {
        int64_t start = rng.uniform_int(0, T - dur);
        bool free = true;
        for (int64_t t = start; t < start + dur; ++t) {
          if (used[static_cast<size_t>(t)]) { free = false; break; }
        }
        if (!free) continue;
        for (int64_t t = start; t < start + dur; ++t) used[static_cast<size_t>(t)] = 1;
        return start;
      }
      return -1;
    };

    auto add_burst = [&](int64_t start, int64_t dur, double freq, double phase,
                         const std::vector<double>& channel_sign) {
      for (int64_t t = start; t < start + dur; ++t) {
        double carrier = spec.amp * std::cos(two_pi * freq * static_cast<double>(t - start) + phase);
        for (int64_t c = 0; c < C; ++c) {
          double v = carrier * channel_sign[static_cast<size_t>(c)];
          double* row = feat.data() + static_cast<size_t>((c * T + t) * hw);
          for (int64_t s = 0; s < hw; ++s) row[s] += v;
        }
      }
    };

    std::vector<double> sign(static_cast<size_t>(C));
    for (int64_t b = 0; b < spec.bursts_per_clip; ++b) {
      int64_t dur = rng.uniform_int(spec.dur_lo, spec.dur_hi);
      int64_t start = place(dur);
      if (start < 0) {
        throw ConfigError(
            "generate: burst packing infeasible for clip " + std::to_string(clip_index) +
            "; reduce bursts_per_clip/dur_hi or increase T_raw");
      }
      int64_t k = rng.uniform_int(0, K - 1);
      double phase = rng.uniform(0.0, two_pi);
      double freq = K > 1
          ? spec.freq_lo + (spec.freq_hi - spec.freq_lo) * static_cast<double>(k) / static_cast<double>(K - 1)
          : spec.freq_lo;
      for (int64_t c = 0; c < C; ++c) sign[static_cast<size_t>(c)] = class_channel_sign(k, c);
      add_burst(start, dur, freq, phase, sign);
      for (int64_t t = start; t < start + dur; ++t) lab[static_cast<size_t>(k * T + t)] = 1.0;
    }

    for (int64_t b = 0; b < spec.distractors_per_clip; ++b) {
      int64_t dur = rng.uniform_int(spec.dur_lo, spec.dur_hi);
      int64_t start = place(dur);
      if (start < 0) {
        throw ConfigError(
            "generate: burst packing infeasible for clip " + std::to_string(clip_index) +
            " (distractors); reduce counts or increase T_raw");
      }
      double phase = rng.uniform(0.0, two_pi);
      for (int64_t c = 0; c < C; ++c) {
        sign[static_cast<size_t>(c)] = rng.uniform() < 0.5 ? -1.0 : 1.0;
      }
      add_burst(start, dur, spec.distractor_freq, phase, sign);
    }

    DetectionClip clip;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "clip_%05lld", static_cast<long long>(clip_index));
    clip.clip_id = idbuf;
    clip.features = Tensor({C, T, H, W}, std::move(feat));
    clip.labels = Tensor({K, T}, std::move(lab));
    clip.stride = spec.input_stride;
    clips.push_back(std::move(clip));
  }
  return clips;
}

Tensor labels_from_intervals(int64_t num_classes, int64_t T,
                             const std::vector<std::array<int64_t, 3>>& iv) {
  if (num_classes < 1 || T < 1) {
    throw ConfigError("labels_from_intervals: num_classes and T must be >= 1");
  }
  std::vector<double> lab(static_cast<size_t>(num_classes * T), 0.0);
  for (const auto& [k, s, e] : iv) {
    if (k < 0 || k >= num_classes || s < 0 || e <= s || e > T) {
      throw FormatError(FormatError::Kind::Corrupt,
                        "interval out of range: [" + std::to_string(k) + ", " +
                            std::to_string(s) + ", " + std::to_string(e) + ")");
    }
    for (int64_t t = s; t < e; ++t) lab[static_cast<size_t>(k * T + t)] = 1.0;
  }
  return Tensor({num_classes, T}, std::move(lab));
}

std::vector<std::array<int64_t, 3>> intervals_from_labels(const Tensor& labels) {
  if (labels.ndim() != 2) {
    throw ConfigError("intervals_from_labels: labels must be [num_classes, T], got " +
                      shape_str(labels.shape()));
  }
  const int64_t K = labels.dim(0), T = labels.dim(1);
  std::vector<std::array<int64_t, 3>> iv;
  for (int64_t k = 0; k < K; ++k) {
    int64_t start = -1;
    for (int64_t t = 0; t <= T; ++t) {
      double v = t < T ? labels.at(k * T + t) : 0.0;
      if (v != 0.0 && v != 1.0) {
        throw ConfigError("intervals_from_labels: labels must be binary");
      }
      if (v == 1.0 && start < 0) start = t;
      if (v == 0.0 && start >= 0) {
        iv.push_back({k, start, t});
        start = -1;
      }
    }
  }
  return iv;
}

namespace {

constexpr int kDatasetVersion = 1;

}  // namespace

void write_dataset(const std::string& dir, const std::vector<DetectionClip>& clips,
                   int64_t num_classes) {
  if (clips.empty()) throw ConfigError("write_dataset: no clips");
  const int64_t stride = clips.front().stride;
  for (const auto& c : clips) {
    if (c.stride != stride) {
      throw ConfigError("write_dataset: clips disagree on stride");
    }
    if (c.labels.ndim() != 2 || c.labels.dim(0) != num_classes) {
      throw ConfigError("write_dataset: labels of " + c.clip_id +
                        " do not match num_classes " + std::to_string(num_classes));
    }
    if (c.features.ndim() != 4 || c.features.dim(1) != c.labels.dim(1)) {
      throw ConfigError("write_dataset: features of " + c.clip_id +
                        " must be [C, T, H, W] with T matching labels");
    }
  }

  fs::create_directories(fs::path(dir) / "clips");

  std::string jsonl;
  for (const auto& c : clips) {
    json line;
    line["clip_id"] = c.clip_id;
    line["num_classes"] = num_classes;
    line["T_raw"] = c.labels.dim(1);
    json ivs = json::array();
    for (const auto& [k, s, e] : intervals_from_labels(c.labels)) {
      ivs.push_back({k, s, e});
    }
    line["intervals"] = std::move(ivs);
    jsonl += line.dump();
    jsonl += '\n';
    write_tensor((fs::path(dir) / "clips" / (c.clip_id + ".cfnt")).string(), c.features);
  }
  write_file((fs::path(dir) / "annotations.jsonl").string(), jsonl);

  json manifest;
  manifest["format"] = "cfn-dataset-split";
  manifest["version"] = kDatasetVersion;
  manifest["num_classes"] = num_classes;
  manifest["num_clips"] = clips.size();
  manifest["stride"] = stride;
  write_file((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

std::vector<DetectionClip> load_dataset(const std::string& dir) {
  const std::string mpath = (fs::path(dir) / "manifest.json").string();
  if (!fs::exists(mpath)) throw ConfigError("no dataset manifest at " + mpath);
  json manifest = parse_json(read_file(mpath), mpath);
  if (!manifest.is_object() || manifest.value("format", "") != "cfn-dataset-split") {
    throw FormatError(FormatError::Kind::Corrupt,
                      "not a dataset split manifest: " + mpath);
  }
  int version = manifest.value("version", -1);
  if (version != kDatasetVersion) {
    throw FormatError(FormatError::Kind::BadVersion,
                      "unsupported dataset version " + std::to_string(version) +
                          " (expected " + std::to_string(kDatasetVersion) + "): " + mpath);
  }
  const int64_t stride = manifest.value("stride", int64_t{1});

  const std::string apath = (fs::path(dir) / "annotations.jsonl").string();
  std::istringstream lines(read_file(apath));
  std::vector<DetectionClip> clips;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j = parse_json(line, apath + ":" + std::to_string(lineno));
    if (!j.is_object() || !j.contains("clip_id") || !j.contains("num_classes") ||
        !j.contains("T_raw") || !j.contains("intervals")) {
      throw FormatError(FormatError::Kind::Corrupt,
                        "annotation line missing fields: " + apath + ":" +
                            std::to_string(lineno));
    }
    DetectionClip clip;
    clip.clip_id = j["clip_id"].get<std::string>();
    const int64_t K = j["num_classes"].get<int64_t>();
    const int64_t T = j["T_raw"].get<int64_t>();
    std::vector<std::array<int64_t, 3>> iv;
    for (const auto& e : j["intervals"]) {
      if (!e.is_array() || e.size() != 3) {
        throw FormatError(FormatError::Kind::Corrupt,
                          "malformed interval: " + apath + ":" + std::to_string(lineno));
      }
      iv.push_back({e[0].get<int64_t>(), e[1].get<int64_t>(), e[2].get<int64_t>()});
    }
    clip.labels = labels_from_intervals(K, T, iv);
    clip.features =
        read_tensor((fs::path(dir) / "clips" / (clip.clip_id + ".cfnt")).string());
    if (clip.features.ndim() != 4 || clip.features.dim(1) != T) {
      throw FormatError(FormatError::Kind::Corrupt,
                        "features of " + clip.clip_id + " have shape " +
                            shape_str(clip.features.shape()) +
                            ", want [C, " + std::to_string(T) + ", H, W]");
    }
    clip.stride = stride;
    clips.push_back(std::move(clip));
  }
  if (clips.empty()) throw ConfigError("dataset split at " + dir + " has no clips");
  return clips;
}

namespace {

constexpr int kCheckpointVersion = 1;

}  // namespace

void save_checkpoint(const std::string& dir, const Checkpoint& ck) {
  fs::create_directories(fs::path(dir) / "params");
  if (!ck.opt.empty()) fs::create_directories(fs::path(dir) / "opt");

  json params = json::array();
  for (const auto& [name, t] : ck.params) {
    if (!t.defined()) throw ConfigError("save_checkpoint: undefined parameter " + name);
    json p;
    p["name"] = name;
    p["shape"] = t.shape();
    params.push_back(std::move(p));
    write_tensor((fs::path(dir) / "params" / (name + ".cfnt")).string(), t);
  }
  json opt = json::array();
  for (const auto& [name, t] : ck.opt) {
    opt.push_back(name);
    write_tensor((fs::path(dir) / "opt" / (name + ".cfnt")).string(), t);
  }

  json manifest;
  manifest["format"] = "cfn-checkpoint";
  manifest["version"] = kCheckpointVersion;
  manifest["epoch"] = ck.epoch;
  manifest["config_hash"] = ck.config_hash;
  manifest["params"] = std::move(params);
  manifest["opt"] = std::move(opt);
  write_file((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::string& dir) {
  const std::string mpath = (fs::path(dir) / "manifest.json").string();
  if (!fs::exists(mpath)) throw ConfigError("no checkpoint manifest at " + mpath);
  json manifest = parse_json(read_file(mpath), mpath);
  if (!manifest.is_object() || manifest.value("format", "") != "cfn-checkpoint") {
    throw FormatError(FormatError::Kind::Corrupt,
                      "not a checkpoint manifest: " + mpath);
  }
  int version = manifest.value("version", -1);
  if (version != kCheckpointVersion) {
    throw FormatError(FormatError::Kind::BadVersion,
                      "unsupported checkpoint version " + std::to_string(version) +
                          " (expected " + std::to_string(kCheckpointVersion) +
                          "): " + mpath);
  }

  Checkpoint ck;
  ck.epoch = manifest.value("epoch", int64_t{0});
  ck.config_hash = manifest.value("config_hash", "");
  for (const auto& p : manifest["params"]) {
    const std::string name = p["name"].get<std::string>();
    const Shape shape = p["shape"].get<Shape>();
    const std::string tpath = (fs::path(dir) / "params" / (name + ".cfnt")).string();
    if (!fs::exists(tpath)) {
      throw FormatError(FormatError::Kind::Corrupt,
                        "parameter listed in manifest but missing on disk: " + tpath);
    }
    Tensor t = read_tensor(tpath);
    if (t.shape() != shape) {
      throw FormatError(FormatError::Kind::Corrupt,
                        "parameter " + name + " has shape " + shape_str(t.shape()) +
                            ", manifest says " + shape_str(shape));
    }
    ck.params.emplace(name, std::move(t));
  }
  if (manifest.contains("opt")) {
    for (const auto& n : manifest["opt"]) {
      const std::string name = n.get<std::string>();
      ck.opt.emplace(name,
                     read_tensor((fs::path(dir) / "opt" / (name + ".cfnt")).string()));
    }
  }
  return ck;
}

}  // namespace cfn
