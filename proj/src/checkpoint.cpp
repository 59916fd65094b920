#include "dfkt/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <fcntl.h>
#include <unistd.h>

#include "dfkt/errors.hpp"

namespace dfkt {

namespace {

class Writer {
public:
    void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }

    template <typename U>
    void uint(U v) {
        for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void i32(int v) { uint(static_cast<std::uint32_t>(v)); }
    void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
    void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }

    void str32(std::string_view s) {
        uint(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }

    std::string& data() { return out_; }

private:
    std::string out_;
};

class Reader {
public:
    explicit Reader(std::string_view in) : in_(in) {}

    std::string_view take(std::size_t n) {
        if (n > in_.size() - pos_) throw ChecksumError("checkpoint truncated");
        auto s = in_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    template <typename U>
    U uint() {
        const auto s = take(sizeof(U));
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) {
            v |= static_cast<U>(static_cast<unsigned char>(s[i])) << (8 * i);
        }
        return v;
    }
    int i32() { return static_cast<int>(uint<std::uint32_t>()); }
    double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }
    float f32() { return std::bit_cast<float>(uint<std::uint32_t>()); }
    std::string str32() { return std::string(take(uint<std::uint32_t>())); }

    bool done() const { return pos_ == in_.size(); }

private:
    std::string_view in_;
    std::size_t pos_ = 0;
};

void write_tensors(Writer& w, const ParamSet<float>& ps) {
    w.uint(static_cast<std::uint32_t>(ps.size()));
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const auto& spec = ps.specs[i];
        w.uint(static_cast<std::uint16_t>(spec.name.size()));
        w.bytes(spec.name.data(), spec.name.size());
        w.uint(static_cast<std::uint8_t>(spec.dims.size()));
        for (int d : spec.dims) w.uint(static_cast<std::uint32_t>(d));
        const auto& t = ps.tensors[i];
        for (Eigen::Index k = 0; k < t.size(); ++k) w.f32(t.data()[k]);
    }
}

ParamSet<float> read_tensors(Reader& r) {
    ParamSet<float> ps;
    const auto count = r.uint<std::uint32_t>();
    std::set<std::string> seen;
    for (std::uint32_t i = 0; i < count; ++i) {
        TensorSpec spec;
        spec.name = std::string(r.take(r.uint<std::uint16_t>()));
        if (!seen.insert(spec.name).second) {
            throw ParameterError("checkpoint: duplicate tensor name '" + spec.name + "'");
        }
        const auto rank = r.uint<std::uint8_t>();
        if (rank != 1 && rank != 2) throw ParameterError("checkpoint: unsupported tensor rank");
        for (int d = 0; d < rank; ++d) spec.dims.push_back(static_cast<int>(r.uint<std::uint32_t>()));
        MatrixF t(spec.rows(), spec.cols());
        for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] = r.f32();
        ps.specs.push_back(std::move(spec));
        ps.tensors.push_back(std::move(t));
    }
    return ps;
}

void check_layout(const ParamSet<float>& ps, const std::vector<TensorSpec>& layout, const char* what) {
    if (ps.specs.size() != layout.size()) {
        throw ParameterError(std::string("checkpoint: ") + what + " tensor count does not match the model layout");
    }
    for (std::size_t i = 0; i < layout.size(); ++i) {
        if (ps.specs[i].name != layout[i].name || ps.specs[i].dims != layout[i].dims) {
            throw ParameterError(std::string("checkpoint: ") + what + " tensor '" + ps.specs[i].name +
                                 "' does not match the model layout");
        }
    }
}

std::uint32_t crc_of(std::string_view s) {
    uLong crc = crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; checkpoints here are far below 4 GiB.
    crc = crc32(crc, reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size()));
    return static_cast<std::uint32_t>(crc);
}

/// Exclusive advisory lock held for the lifetime of the object.
class LockFile {
public:
    explicit LockFile(std::filesystem::path path) : path_(std::move(path)) {
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0) {
            throw std::runtime_error("checkpoint " + path_.string() + " is locked by another writer");
        }
    }
    ~LockFile() {
        ::close(fd_);
        std::error_code ec;
        std::filesystem::remove(path_, ec);
    }
    LockFile(const LockFile&) = delete;
    LockFile& operator=(const LockFile&) = delete;

private:
    std::filesystem::path path_;
    int fd_ = -1;
};

} // namespace

Model Checkpoint::model(bool prefer_ema) const {
    return Model{config.model, grid, prefer_ema && ema ? *ema : params};
}

std::string encode_checkpoint(const Checkpoint& c) {
    Writer w;
    w.bytes("DFKT", 4);
    w.uint(kCheckpointVersion);
    w.str32(serialize_config(to_config_map(c.config)));

    w.uint(static_cast<std::uint32_t>(c.schedule.num_steps()));
    w.f64(c.schedule.scale);
    for (double b : c.schedule.betas) w.f64(b);
    for (double a : c.schedule.alpha_bars) w.f64(a);

    w.i32(c.grid.grid_size);
    w.i32(c.grid.scale);
    w.uint(static_cast<std::uint8_t>(c.grid.mode == GridMode::resample ? 1 : 0));

    write_tensors(w, c.params);
    w.uint(static_cast<std::uint8_t>(c.ema ? 1 : 0));
    if (c.ema) write_tensors(w, *c.ema);

    w.uint(static_cast<std::uint32_t>(c.train_metas.size()));
    for (const auto& m : c.train_metas) {
        w.i32(m.orig_h);
        w.i32(m.orig_w);
        w.i32(m.crop_top);
        w.i32(m.crop_left);
        w.f64(m.crop_scale);
        w.uint(static_cast<std::uint8_t>(m.flip ? 1 : 0));
    }
    w.uint(crc_of(w.data()));
    return std::move(w.data());
}

Checkpoint decode_checkpoint(std::string_view bytes) {
    if (bytes.size() < 10) throw ChecksumError("checkpoint truncated");
    const auto body = bytes.substr(0, bytes.size() - 4);
    Reader tail(bytes.substr(bytes.size() - 4));
    if (tail.uint<std::uint32_t>() != crc_of(body)) throw ChecksumError("checkpoint checksum mismatch");

    Reader r(body);
    if (r.take(4) != "DFKT") throw ChecksumError("not a checkpoint (bad magic)");
    const auto version = r.uint<std::uint16_t>();
    if (version != kCheckpointVersion) {
        throw ParameterError("checkpoint: unsupported format version " + std::to_string(version));
    }

    Checkpoint c;
    c.config = apply_config(parse_config(r.str32()));

    const auto T = r.uint<std::uint32_t>();
    c.schedule.scale = r.f64();
    c.schedule.betas.resize(T);
    c.schedule.alpha_bars.resize(T);
    for (auto& b : c.schedule.betas) b = r.f64();
    for (auto& a : c.schedule.alpha_bars) a = r.f64();

    c.grid.grid_size = r.i32();
    c.grid.scale = r.i32();
    c.grid.mode = r.uint<std::uint8_t>() ? GridMode::resample : GridMode::extrapolate;

    const auto layout = model_layout(c.config.model);
    c.params = read_tensors(r);
    check_layout(c.params, layout, "parameter");
    if (r.uint<std::uint8_t>()) {
        c.ema = read_tensors(r);
        check_layout(*c.ema, layout, "EMA");
    }

    const auto n = r.uint<std::uint32_t>();
    c.train_metas.resize(n);
    for (auto& m : c.train_metas) {
        m.orig_h = r.i32();
        m.orig_w = r.i32();
        m.crop_top = r.i32();
        m.crop_left = r.i32();
        m.crop_scale = r.f64();
        m.flip = r.uint<std::uint8_t>() != 0;
    }
    if (!r.done()) throw ChecksumError("checkpoint has trailing bytes");
    return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const std::string bytes = encode_checkpoint(ckpt);
    LockFile lock(path.string() + ".lock");
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParameterError("cannot read checkpoint " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return decode_checkpoint(ss.str());
}

bool same_tensors(const ParamSet<float>& a, const ParamSet<float>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a.specs[i].name != b.specs[i].name || a.specs[i].dims != b.specs[i].dims) return false;
        const auto& x = a.tensors[i];
        const auto& y = b.tensors[i];
        if (std::memcmp(x.data(), y.data(), sizeof(float) * static_cast<std::size_t>(x.size())) != 0) return false;
    }
    return true;
}

bool operator==(const Checkpoint& a, const Checkpoint& b) {
    return to_config_map(a.config) == to_config_map(b.config) && a.schedule.betas == b.schedule.betas &&
           a.schedule.alpha_bars == b.schedule.alpha_bars && a.schedule.scale == b.schedule.scale &&
           a.grid == b.grid && same_tensors(a.params, b.params) && a.ema.has_value() == b.ema.has_value() &&
           (!a.ema || same_tensors(*a.ema, *b.ema)) && a.train_metas == b.train_metas;
}

} // namespace dfkt
