#include "tcclab/pack_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace tcclab {

namespace {

constexpr char kMagic[8] = {'T', 'C', 'C', 'P', 'A', 'C', 'K', '1'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_i32(std::string& out, std::int32_t v) { put_u32(out, static_cast<std::uint32_t>(v)); }

void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

class Reader {
  public:
    explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(bytes_[pos_++]);
    }

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += 4;
        return v;
    }

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += 8;
        return v;
    }

    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }

    double f64() { return std::bit_cast<double>(u64()); }

    void raw(char* dst, std::size_t n) {
        need(n);
        std::memcpy(dst, bytes_.data() + pos_, n);
        pos_ += n;
    }

    bool done() const { return pos_ == bytes_.size(); }

  private:
    void need(std::size_t n) {
        if (pos_ + n > bytes_.size()) throw PackFormatError("unexpected end of pack");
    }

    std::string bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

void save_pack(const CalibrationPack& pack, std::size_t d_model, const std::string& path) {
    std::string out;
    out.append(kMagic, sizeof(kMagic));
    put_u32(out, kVersion);
    put_u64(out, pack.fingerprint);
    put_u32(out, static_cast<std::uint32_t>(d_model));
    put_i32(out, pack.window_first);
    put_i32(out, pack.window_last);
    put_f64(out, pack.alpha);
    out.push_back(static_cast<char>(static_cast<std::uint8_t>(pack.variant)));
    out.push_back(static_cast<char>(static_cast<std::uint8_t>(pack.pooling)));
    put_u32(out, static_cast<std::uint32_t>(pack.operators.size()));

    for (const CalibrationOperator& op : pack.operators) {
        if (op.mu_a.size() != d_model || op.mu_b.size() != d_model ||
            op.rotation.rows != d_model || op.rotation.cols != d_model) {
            throw std::invalid_argument("save_pack: operator dimension mismatch");
        }
        put_i32(out, op.site.step_index);
        put_i32(out, op.site.layer);
        put_i32(out, static_cast<std::int32_t>(op.site.kind));
        for (double v : op.mu_a) put_f64(out, v);
        for (double v : op.mu_b) put_f64(out, v);
        put_f64(out, op.scale);
        for (double v : op.rotation.data) put_f64(out, v);
    }

    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) throw std::runtime_error("save_pack: cannot open '" + path + "'");
    file.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!file) throw std::runtime_error("save_pack: write failed for '" + path + "'");
}

CalibrationPack load_pack(const std::string& path, std::uint64_t expected_fingerprint) {
    std::ifstream file(path, std::ios::binary);
    if (!file) throw std::runtime_error("load_pack: cannot open '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
    Reader in(std::move(bytes));

    char magic[8];
    in.raw(magic, sizeof(magic));
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw PackFormatError("bad magic");
    if (in.u32() != kVersion) throw PackFormatError("pack version mismatch");

    CalibrationPack pack;
    pack.fingerprint = in.u64();
    const std::uint32_t d = in.u32();
    if (d == 0) throw PackFormatError("invalid model width in pack");
    pack.window_first = in.i32();
    pack.window_last = in.i32();
    pack.alpha = in.f64();
    const std::uint8_t variant = in.u8();
    if (variant > 2) throw PackFormatError("invalid variant in pack");
    pack.variant = static_cast<CalibrationVariant>(variant);
    const std::uint8_t pooling = in.u8();
    if (pooling > 2) throw PackFormatError("invalid pooling in pack");
    pack.pooling = static_cast<PoolingMode>(pooling);
    const std::uint32_t count = in.u32();

    pack.operators.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        CalibrationOperator op;
        op.site.step_index = in.i32();
        op.site.layer = in.i32();
        const std::int32_t kind = in.i32();
        if (kind != 0 && kind != 1) throw PackFormatError("invalid module kind in pack");
        op.site.kind = static_cast<ModuleKind>(kind);
        op.mu_a.resize(d);
        for (double& v : op.mu_a) v = in.f64();
        op.mu_b.resize(d);
        for (double& v : op.mu_b) v = in.f64();
        op.scale = in.f64();
        op.rotation = Matrix(d, d);
        for (double& v : op.rotation.data) v = in.f64();
        op.alpha = pack.alpha;
        op.variant = pack.variant;
        pack.operators.push_back(std::move(op));
    }
    if (!in.done()) throw PackFormatError("trailing bytes in pack");

    if (pack.fingerprint != expected_fingerprint) {
        throw PackMismatchError("pack fingerprint mismatch");
    }
    return pack;
}

}  // namespace tcclab
