#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hpdm/rng.hpp"
#include "hpdm/serialize.hpp"
#include "hpdm/tensor.hpp"

namespace hpdm {

// Deterministic synthetic video source. Each class owns a shape type, a
// palette and a background tint; shapes drift with one shared integer
// velocity per video and wrap toroidally, so consecutive frames are exact
// toroidal shifts of each other. Pixels live in [-1, 1].
struct SyntheticSpec {
    int64_t frames = 16;
    int64_t height = 32;
    int64_t width = 32;
    int64_t channels = 3;
    int64_t num_classes = 4;
    int64_t shapes_per_video = 3;
    int64_t velocity_max = 2;  // voxels per frame, per spatial axis
    uint64_t seed = 0;

    void validate() const {
        if (frames < 1 || height < 4 || width < 4) throw ConfigError("data: resolution too small");
        if (channels != 3) throw ConfigError("data: only 3-channel video is supported");
        if (num_classes < 1) throw ConfigError("data.classes: must be >= 1");
        if (shapes_per_video < 1) throw ConfigError("data.shapes: must be >= 1");
        if (velocity_max < 0) throw ConfigError("data.velocity_max: must be >= 0");
    }
};

struct VideoRecord {
    Tensor video;  // [3, F, H, W]
    int64_t class_id = 0;
    uint64_t source_index = 0;
};

namespace detail {

struct ClassStyle {
    int shape_type;            // 0 box, 1 disc, 2 cross, 3 ring
    float palette[3];          // shape base color
    float background[3];       // dark class tint
};

inline ClassStyle class_style(uint64_t class_id) {
    Rng rng = Rng(0xC1A55).fork(class_id);
    ClassStyle st;
    st.shape_type = int(class_id % 4);
    for (int c = 0; c < 3; c++) {
        st.palette[c] = float(rng.uniform(0.35, 1.0));
        st.background[c] = float(rng.uniform(-1.0, -0.8));
    }
    // push one channel toward full scale so palettes stay distinguishable
    st.palette[class_id % 3] = 1.0f;
    return st;
}

inline bool shape_hit(int type, int64_t dh, int64_t dw, int64_t sz) {
    switch (type) {
        case 0: return std::abs(dh) <= sz && std::abs(dw) <= sz;
        case 1: return dh * dh + dw * dw <= sz * sz;
        case 2:
            return (std::abs(dh) <= std::max<int64_t>(1, sz / 3) && std::abs(dw) <= sz) ||
                   (std::abs(dw) <= std::max<int64_t>(1, sz / 3) && std::abs(dh) <= sz);
        default: {
            int64_t d2 = dh * dh + dw * dw;
            return 4 * d2 >= sz * sz && d2 <= sz * sz;
        }
    }
}

}  // namespace detail

// Record `index` of the dataset (counter-based rng keyed by index, so
// generation is order-free and embarrassingly parallel).
inline VideoRecord generate_video(const SyntheticSpec& spec, uint64_t index) {
    spec.validate();
    Rng rng = Rng(spec.seed).fork("data").fork(index);
    VideoRecord rec;
    rec.source_index = index;
    rec.class_id = rng.uniform_int(0, spec.num_classes - 1);
    const auto style = detail::class_style(uint64_t(rec.class_id));
    const int64_t F = spec.frames, H = spec.height, W = spec.width;
    rec.video = Tensor::zeros({3, F, H, W});
    auto& v = rec.video.values();
    const int64_t plane = F * H * W;
    for (int c = 0; c < 3; c++)
        std::fill(v.begin() + c * plane, v.begin() + (c + 1) * plane, style.background[c]);

    const int64_t vel_h = rng.uniform_int(-spec.velocity_max, spec.velocity_max);
    const int64_t vel_w = rng.uniform_int(-spec.velocity_max, spec.velocity_max);
    struct Shape {
        int64_t h0, w0, size;
        float shade;
    };
    std::vector<Shape> shapes;
    for (int64_t s = 0; s < spec.shapes_per_video; s++) {
        Shape sh;
        sh.h0 = rng.uniform_int(0, H - 1);
        sh.w0 = rng.uniform_int(0, W - 1);
        sh.size = rng.uniform_int(std::max<int64_t>(2, H / 8), std::max<int64_t>(3, H / 4));
        sh.shade = float(rng.uniform(0.7, 1.0));
        shapes.push_back(sh);
    }
    for (int64_t t = 0; t < F; t++)
        for (const auto& sh : shapes) {
            const int64_t ch = ((sh.h0 + vel_h * t) % H + H) % H;
            const int64_t cw = ((sh.w0 + vel_w * t) % W + W) % W;
            for (int64_t dh = -sh.size; dh <= sh.size; dh++)
                for (int64_t dw = -sh.size; dw <= sh.size; dw++) {
                    if (!detail::shape_hit(style.shape_type, dh, dw, sh.size)) continue;
                    const int64_t ph = ((ch + dh) % H + H) % H;
                    const int64_t pw = ((cw + dw) % W + W) % W;
                    for (int c = 0; c < 3; c++)
                        v[c * plane + (t * H + ph) * W + pw] =
                            std::clamp(style.palette[c] * sh.shade, -1.0f, 1.0f);
                }
        }
    return rec;
}

inline std::vector<VideoRecord> generate_dataset(const SyntheticSpec& spec, int64_t count) {
    if (count < 1) throw ConfigError("generate_dataset: count must be >= 1");
    std::vector<VideoRecord> out;
    out.reserve(count);
    for (int64_t i = 0; i < count; i++) out.push_back(generate_video(spec, uint64_t(i)));
    return out;
}

// ------------------------------------------------------------ video file io
// "HPDMVID0" | u32 class | u32 C,F,H,W | f32 payload | crc32, all LE.

inline constexpr char kVideoMagic[9] = "HPDMVID0";

inline std::vector<unsigned char> encode_video(const VideoRecord& rec) {
    if (rec.video.rank() != 4)
        throw DataError("encode_video: video tensor must be [C,F,H,W]");
    ByteWriter w;
    w.raw(kVideoMagic, 8);
    w.u32(uint32_t(rec.class_id));
    for (int a = 0; a < 4; a++) w.u32(uint32_t(rec.video.dim(a)));
    w.f32_array(rec.video.values().data(), rec.video.values().size());
    w.append_crc();
    return w.bytes;
}

inline VideoRecord decode_video(const std::vector<unsigned char>& bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kVideoMagic, 8) != 0)
        throw DataError("video file: bad magic");
    const size_t header = 8 + 4 + 4 * 4;
    if (bytes.size() < header + 4) throw DataError("video file: truncated header");
    ByteReader r(bytes);
    r.at = 8;
    VideoRecord rec;
    rec.class_id = r.u32("class id");
    int64_t dims[4];
    for (auto& d : dims) d = r.u32("dims");
    const size_t expect = header + 4 * size_t(dims[0] * dims[1] * dims[2] * dims[3]) + 4;
    if (bytes.size() < expect) throw DataError("video file: truncated payload");
    if (bytes.size() != expect) throw DataError("video file: trailing bytes");
    r.check_trailing_crc("video file");
    std::vector<float> payload(size_t(dims[0] * dims[1] * dims[2] * dims[3]));
    r.f32_array(payload.data(), payload.size(), "payload");
    rec.video = Tensor::from_values({dims[0], dims[1], dims[2], dims[3]}, std::move(payload));
    return rec;
}

inline void write_video(const std::string& path, const VideoRecord& rec) {
    write_file(path, encode_video(rec));
}

inline VideoRecord read_video(const std::string& path) { return decode_video(read_file(path)); }

// -------------------------------------------------------------- PPM export

// Map [-1,1] to [0,255] with round-half-up: -1 -> 0, 0 -> 128, 1 -> 255.
inline uint8_t pixel_to_byte(float v) {
    double scaled = (double(v) + 1.0) * 0.5 * 255.0;
    double rounded = std::floor(scaled + 0.5);
    return uint8_t(std::clamp(rounded, 0.0, 255.0));
}

inline std::vector<std::string> export_frames(const VideoRecord& rec, const std::string& dir) {
    if (rec.video.rank() != 4 || rec.video.dim(0) != 3)
        throw DataError("export_frames: expected a 3-channel video");
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (!std::filesystem::is_directory(dir))
        throw DataError(strcat_all("export_frames: cannot create directory ", dir));
    const int64_t F = rec.video.dim(1), H = rec.video.dim(2), W = rec.video.dim(3);
    const auto& v = rec.video.values();
    const int64_t plane = F * H * W;
    std::vector<std::string> paths;
    for (int64_t t = 0; t < F; t++) {
        char name[32];
        std::snprintf(name, sizeof(name), "frame_%04lld.ppm", static_cast<long long>(t));
        std::string path = dir + "/" + name;
        std::string header = strcat_all("P6\n", W, " ", H, "\n255\n");
        std::vector<unsigned char> bytes(header.begin(), header.end());
        for (int64_t h = 0; h < H; h++)
            for (int64_t w = 0; w < W; w++)
                for (int c = 0; c < 3; c++)
                    bytes.push_back(pixel_to_byte(v[c * plane + (t * H + h) * W + w]));
        write_file(path, bytes);
        paths.push_back(std::move(path));
    }
    return paths;
}

}  // namespace hpdm
