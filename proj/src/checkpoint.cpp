#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "facm/network.hpp"

namespace facm::nn {
namespace {

constexpr char kMagic[8] = {'F', 'A', 'C', 'M', 'C', 'K', 'P', 'T'};

class Writer {
public:
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void bytes(std::string_view s) { buf_.append(s); }
    void str(std::string_view s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s);
    }
    const std::string& buffer() const { return buf_; }

private:
    std::string buf_;
};

class Reader {
public:
    explicit Reader(std::string data) : data_(std::move(data)) {}

    std::uint32_t u32() {
        need(4, "u32");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8, "u64");
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::string str(const char* what) { return bytes(u32(), what); }
    bool at_end() const { return pos_ == data_.size(); }
    std::size_t remaining() const { return data_.size() - pos_; }

private:
    void need(std::size_t n, const char* what) const {
        if (data_.size() - pos_ < n)
            throw CheckpointError(std::string("corrupt checkpoint: truncated while reading ") + what + " at byte " +
                                  std::to_string(pos_));
    }

    std::string data_;
    std::size_t pos_ = 0;
};

void write_tensors(Writer& w, const std::string& prefix, const ParamMap& tensors) {
    for (const auto& [name, t] : tensors) {
        w.str(prefix + name);
        w.u32(static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) w.u64(d);
        for (double v : t.data()) w.f64(v);
    }
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const unsigned long long v = std::stoull(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw CheckpointError("corrupt checkpoint: bad value '" + value + "' for " + key);
    }
}

}  // namespace

std::string serialize_network_config(const NetworkConfig& c) {
    std::ostringstream os;
    os.precision(17);
    os << "input_dim = " << c.input_dim << '\n'
       << "hidden_width = " << c.hidden_width << '\n'
       << "depth = " << c.depth << '\n'
       << "time_embed_dim = " << c.time_embed_dim << '\n'
       << "num_classes = " << c.num_classes << '\n'
       << "scheme = " << flow::to_string(c.scheme) << '\n'
       << "seed = " << c.seed << '\n'
       << "dropout = " << c.dropout << '\n';
    return os.str();
}

namespace {

std::map<std::string, std::string> parse_blob(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        const auto eq = line.find(" = ");
        if (eq == std::string::npos) continue;
        kv[line.substr(0, eq)] = line.substr(eq + 3);
    }
    return kv;
}

NetworkConfig config_from_blob(const std::map<std::string, std::string>& kv) {
    auto get = [&](const std::string& key) -> const std::string& {
        const auto it = kv.find(key);
        if (it == kv.end()) throw CheckpointError("corrupt checkpoint: config blob lacks '" + key + "'");
        return it->second;
    };
    NetworkConfig c;
    c.input_dim = parse_u64("input_dim", get("input_dim"));
    c.hidden_width = parse_u64("hidden_width", get("hidden_width"));
    c.depth = parse_u64("depth", get("depth"));
    c.time_embed_dim = parse_u64("time_embed_dim", get("time_embed_dim"));
    c.num_classes = static_cast<int>(parse_u64("num_classes", get("num_classes")));
    try {
        c.scheme = flow::parse_scheme(get("scheme"));
        c.dropout = std::stod(get("dropout"));
    } catch (const ContractViolation& e) {
        throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
    } catch (const std::logic_error&) {
        throw CheckpointError("corrupt checkpoint: bad dropout value");
    }
    c.seed = parse_u64("seed", get("seed"));
    return c;
}

}  // namespace

NetworkConfig parse_network_config(const std::string& text) { return config_from_blob(parse_blob(text)); }

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    Writer w;
    w.bytes(std::string_view(kMagic, sizeof kMagic));
    w.u32(kCheckpointVersion);
    std::ostringstream blob;
    blob << serialize_network_config(ckpt.config) << "step = " << ckpt.step << '\n'
         << "optimizer_step = " << ckpt.optimizer_step << '\n'
         << "config_hash = " << ckpt.config_hash << '\n';
    w.str(blob.str());
    const std::size_t count =
        ckpt.params.size() + (ckpt.ema ? ckpt.ema->size() : 0) + (ckpt.optimizer ? ckpt.optimizer->size() : 0);
    w.u32(static_cast<std::uint32_t>(count));
    write_tensors(w, "param/", ckpt.params);
    if (ckpt.ema) write_tensors(w, "ema/", *ckpt.ema);
    if (ckpt.optimizer) write_tensors(w, "opt/", *ckpt.optimizer);

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw CheckpointError("cannot write checkpoint to " + tmp.string());
        os.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
        if (!os) throw CheckpointError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, std::optional<flow::Scheme> expected_scheme) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    Reader r(ss.str());

    if (r.bytes(sizeof kMagic, "magic") != std::string_view(kMagic, sizeof kMagic))
        throw CheckpointError(path.string() + " is not a checkpoint (bad magic)");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                              std::to_string(kCheckpointVersion) + ")");
    const auto kv = parse_blob(r.str("config blob"));
    Checkpoint ckpt;
    ckpt.config = config_from_blob(kv);
    if (auto it = kv.find("step"); it != kv.end()) ckpt.step = parse_u64("step", it->second);
    if (auto it = kv.find("optimizer_step"); it != kv.end())
        ckpt.optimizer_step = parse_u64("optimizer_step", it->second);
    if (auto it = kv.find("config_hash"); it != kv.end()) ckpt.config_hash = it->second;

    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.str("tensor name");
        const std::uint32_t rank = r.u32();
        if (rank > 8) throw CheckpointError("corrupt checkpoint: tensor '" + name + "' claims rank " + std::to_string(rank));
        Shape shape(rank);
        std::size_t n = 1;
        for (auto& d : shape) {
            d = r.u64();
            if (d != 0 && n > r.remaining() / d)
                throw CheckpointError("corrupt checkpoint: tensor '" + name + "' payload exceeds file size");
            n *= d;
        }
        if (n > r.remaining() / sizeof(double))
            throw CheckpointError("corrupt checkpoint: tensor '" + name + "' payload truncated");
        std::vector<double> data(n);
        for (double& v : data) v = r.f64();
        Tensor t(shape, std::move(data));
        const auto slash = name.find('/');
        const std::string group = name.substr(0, slash), key = name.substr(slash + 1);
        if (group == "param") ckpt.params[key] = std::move(t);
        else if (group == "ema") (ckpt.ema ? *ckpt.ema : ckpt.ema.emplace())[key] = std::move(t);
        else if (group == "opt") (ckpt.optimizer ? *ckpt.optimizer : ckpt.optimizer.emplace())[key] = std::move(t);
        else throw CheckpointError("corrupt checkpoint: unknown tensor group in '" + name + "'");
    }
    if (!r.at_end()) throw CheckpointError("corrupt checkpoint: trailing bytes after tensor table");

    if (expected_scheme && *expected_scheme != ckpt.config.scheme)
        throw CheckpointError("checkpoint " + path.string() + " uses scheme " +
                              std::string(flow::to_string(ckpt.config.scheme)) + " but " +
                              std::string(flow::to_string(*expected_scheme)) + " was requested");
    // Shapes must agree with what the config would build.
    const Network reference = Network::init(ckpt.config);
    auto check = [&](const ParamMap& tensors, const char* group) {
        if (tensors.size() != reference.params().size())
            throw CheckpointError(std::string("corrupt checkpoint: ") + group + " tensor set does not match config");
        for (const auto& [name, t] : reference.params()) {
            const auto it = tensors.find(name);
            if (it == tensors.end() || it->second.shape() != t.shape())
                throw CheckpointError(std::string("corrupt checkpoint: ") + group + " tensor '" + name +
                                      "' missing or misshapen");
        }
    };
    check(ckpt.params, "param");
    if (ckpt.ema) check(*ckpt.ema, "ema");
    return ckpt;
}

void save(const Network& net, const std::filesystem::path& path) {
    Checkpoint c;
    c.config = net.config();
    c.params = net.params();
    save_checkpoint(c, path);
}

Network load(const std::filesystem::path& path, std::optional<flow::Scheme> expected_scheme) {
    return load_checkpoint(path, expected_scheme).network();
}

}  // namespace facm::nn
