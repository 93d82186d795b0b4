// Copyright Contributors to the shelltex project
// SPDX-License-Identifier: Apache-2.0
//
// Little-endian binary checkpoints.
//
// Layout (all integers and floats little-endian):
//   "SHTX" u32 version
//   u64 count, then count x 10 f32 (position, quaternion, log-scale, opacity logit)
//   u8 has_sh   [i32 degree, count x 3(D+1)^2 f32]
//   u8 has_field [i32 L, u32 T, i32 F, L x i32 resolutions, f32 bound, u8 contract, L*T*F f32]
//   u8 has_decoder [u32 n, n x i32 dims, u64 p, p x f32]
//   3 x f32 background, i32 lambda, i32 scene sh degree
//   u64 length, config JSON text
//
#pragma once

#include "shelltex/core/errors.hpp"
#include "shelltex/renderer.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace shelltex {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'S', 'H', 'T', 'X'};
inline constexpr std::size_t kSurfelRecordBytes = 10 * sizeof(float);

struct Checkpoint {
    Scene<float> scene;
    std::string config; // JSON echo of the training configuration
};

/// Byte sizes of the stored parameter blocks.
struct ModelFootprint {
    std::size_t surfels = 0;
    std::size_t geometry_bytes = 0;   // surfel records only
    std::size_t appearance_bytes = 0; // SH + hash tables + decoder
    std::size_t sh_bytes = 0, table_bytes = 0, decoder_bytes = 0;
};

inline ModelFootprint footprint(const Scene<float> &s) {
    ModelFootprint f;
    f.surfels = s.surfels.size();
    f.geometry_bytes = f.surfels * kSurfelRecordBytes;
    for (const auto &sf : s.surfels)
        f.sh_bytes += sf.sh.size() * sizeof(float);
    if (s.field)
        f.table_bytes = s.field->tables.size() * sizeof(float);
    if (s.decoder)
        f.decoder_bytes = s.decoder->param_count() * sizeof(float);
    f.appearance_bytes = f.sh_bytes + f.table_bytes + f.decoder_bytes;
    return f;
}

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
public:
    void bytes(const void *p, std::size_t n) {
        const auto *c = static_cast<const char *>(p);
        buf.insert(buf.end(), c, c + n);
    }
    template <class U> void put(U v) { bytes(&v, sizeof(U)); }
    void floats(const float *p, std::size_t n) { bytes(p, n * sizeof(float)); }
    std::vector<char> buf;
};

class Reader {
public:
    explicit Reader(std::vector<char> data) : buf(std::move(data)) {}
    void bytes(void *p, std::size_t n) {
        if (n > buf.size() - pos)
            throw IoError(IoError::Kind::TruncatedCheckpoint, "truncated checkpoint");
        std::memcpy(p, buf.data() + pos, n);
        pos += n;
    }
    template <class U> U get() {
        U v;
        bytes(&v, sizeof(U));
        return v;
    }
    void floats(float *p, std::size_t n) {
        if (n > (buf.size() - pos) / sizeof(float))
            throw IoError(IoError::Kind::TruncatedCheckpoint, "truncated checkpoint");
        bytes(p, n * sizeof(float));
    }
    std::size_t remaining() const { return buf.size() - pos; }

private:
    std::vector<char> buf;
    std::size_t pos = 0;
};

} // namespace detail

inline std::vector<char> serialize_checkpoint(const Scene<float> &scene, const std::string &config = "{}") {
    detail::Writer w;
    w.bytes(kCheckpointMagic, 4);
    w.put<std::uint32_t>(kCheckpointVersion);
    const std::uint64_t n = scene.surfels.size();
    w.put<std::uint64_t>(n);
    float rec[10];
    for (const auto &s : scene.surfels) {
        Surfel<float> geo = s;
        geo.sh.clear();
        geo.write_params(rec);
        w.floats(rec, 10);
    }
    int degree = n ? scene.surfels.front().sh_degree() : -1;
    for (const auto &s : scene.surfels)
        if (s.sh_degree() != degree)
            throw StateError("checkpoint: surfels carry mixed SH degrees");
    w.put<std::uint8_t>(degree >= 0 ? 1 : 0);
    if (degree >= 0) {
        w.put<std::int32_t>(degree);
        for (const auto &s : scene.surfels)
            w.floats(s.sh.data(), s.sh.size());
    }
    w.put<std::uint8_t>(scene.field ? 1 : 0);
    if (scene.field) {
        const auto &f = *scene.field;
        w.put<std::int32_t>(f.levels);
        w.put<std::uint32_t>(f.table_size);
        w.put<std::int32_t>(f.feat_dim);
        for (int r : f.resolutions)
            w.put<std::int32_t>(r);
        w.put<float>(f.bound);
        w.put<std::uint8_t>(scene.contract ? 1 : 0);
        w.floats(f.tables.data(), f.tables.size());
    }
    w.put<std::uint8_t>(scene.decoder ? 1 : 0);
    if (scene.decoder) {
        const auto &d = *scene.decoder;
        w.put<std::uint32_t>(static_cast<std::uint32_t>(d.dims().size()));
        for (int k : d.dims())
            w.put<std::int32_t>(k);
        w.put<std::uint64_t>(d.param_count());
        w.floats(d.params().data(), d.param_count());
    }
    for (int k = 0; k < 3; ++k)
        w.put<float>(scene.background[k]);
    w.put<std::int32_t>(scene.anneal.lambda);
    w.put<std::int32_t>(scene.sh_degree);
    w.put<std::uint64_t>(config.size());
    w.bytes(config.data(), config.size());
    return std::move(w.buf);
}

inline Checkpoint deserialize_checkpoint(std::vector<char> data) {
    if (data.size() < 4 || std::memcmp(data.data(), kCheckpointMagic, 4) != 0)
        throw IoError(IoError::Kind::NotACheckpoint, "not a checkpoint (bad magic)");
    detail::Reader r(std::move(data));
    char magic[4];
    r.bytes(magic, 4);
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw IoError(IoError::Kind::VersionMismatch,
                      "checkpoint version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
    Checkpoint ck;
    auto &sc = ck.scene;
    const auto n = r.get<std::uint64_t>();
    if (n > r.remaining() / kSurfelRecordBytes)
        throw IoError(IoError::Kind::TruncatedCheckpoint, "truncated checkpoint");
    sc.surfels.resize(n);
    float rec[10];
    for (auto &s : sc.surfels) {
        r.floats(rec, 10);
        s.read_params(rec);
    }
    if (r.get<std::uint8_t>()) {
        const auto degree = r.get<std::int32_t>();
        if (degree < 0 || degree > kMaxShDegree)
            throw IoError(IoError::Kind::NotACheckpoint, "checkpoint has invalid SH degree");
        for (auto &s : sc.surfels) {
            s.sh.resize(3 * sh_coeff_count(degree));
            r.floats(s.sh.data(), s.sh.size());
        }
    }
    if (r.get<std::uint8_t>()) {
        HashField<float> f;
        f.levels = r.get<std::int32_t>();
        f.table_size = r.get<std::uint32_t>();
        f.feat_dim = r.get<std::int32_t>();
        if (f.levels <= 0 || f.levels > 64 || f.feat_dim <= 0 || f.feat_dim > 64 || f.table_size == 0 ||
            (f.table_size & (f.table_size - 1)) != 0)
            throw IoError(IoError::Kind::NotACheckpoint, "checkpoint has an invalid hash-field header");
        for (int l = 0; l < f.levels; ++l)
            f.resolutions.push_back(r.get<std::int32_t>());
        f.bound = r.get<float>();
        sc.contract = r.get<std::uint8_t>() != 0;
        const std::size_t count = std::size_t(f.levels) * f.table_size * f.feat_dim;
        if (count > r.remaining() / sizeof(float))
            throw IoError(IoError::Kind::TruncatedCheckpoint, "truncated checkpoint");
        f.tables.resize(count);
        r.floats(f.tables.data(), count);
        sc.field = std::move(f);
    }
    if (r.get<std::uint8_t>()) {
        const auto nd = r.get<std::uint32_t>();
        if (nd < 2 || nd > 64)
            throw IoError(IoError::Kind::NotACheckpoint, "checkpoint has an invalid decoder header");
        std::vector<int> dims(nd);
        for (auto &d : dims)
            d = r.get<std::int32_t>();
        Decoder<float> dec(dims);
        const auto p = r.get<std::uint64_t>();
        if (p != dec.param_count())
            throw IoError(IoError::Kind::NotACheckpoint, "checkpoint decoder size mismatch");
        r.floats(dec.params().data(), p);
        sc.decoder = std::move(dec);
    }
    for (int k = 0; k < 3; ++k)
        sc.background[k] = r.get<float>();
    sc.anneal.lambda = r.get<std::int32_t>();
    sc.sh_degree = r.get<std::int32_t>();
    const auto len = r.get<std::uint64_t>();
    if (len > r.remaining())
        throw IoError(IoError::Kind::TruncatedCheckpoint, "truncated checkpoint");
    ck.config.resize(len);
    r.bytes(ck.config.data(), len);
    return ck;
}

inline void save_checkpoint(const Scene<float> &scene, const std::string &path, const std::string &config = "{}") {
    const auto buf = serialize_checkpoint(scene, config);
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw IoError(IoError::Kind::WriteFailed, "cannot write checkpoint: " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out)
        throw IoError(IoError::Kind::WriteFailed, "failed writing checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError(IoError::Kind::MissingFile, "cannot open checkpoint: " + path);
    std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(std::move(data));
}

} // namespace shelltex
