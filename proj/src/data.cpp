#include "promptmoe/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>

#include "json.hpp"
#include "promptmoe/error.hpp"

namespace pmoe {

namespace fs = std::filesystem;

const char* texture_name(Texture t) {
    switch (t) {
        case Texture::checker: return "checker";
        case Texture::stripes: return "stripes";
        case Texture::blobs: return "blobs";
        case Texture::gradient: return "gradient";
        case Texture::cellular: return "noise-cellular";
    }
    return "?";
}

const char* defect_name(Defect d) {
    switch (d) {
        case Defect::scratch: return "scratch-line";
        case Defect::blotch: return "blotch";
        case Defect::hole: return "hole";
        case Defect::swap_patch: return "swap-patch";
    }
    return "?";
}

Texture parse_texture(const std::string& s) {
    for (Texture t : {Texture::checker, Texture::stripes, Texture::blobs, Texture::gradient, Texture::cellular})
        if (s == texture_name(t)) return t;
    throw ConfigError("unknown texture family '" + s + "'");
}

Defect parse_defect(const std::string& s) {
    for (Defect d : {Defect::scratch, Defect::blotch, Defect::hole, Defect::swap_patch})
        if (s == defect_name(d)) return d;
    throw ConfigError("unknown defect family '" + s + "'");
}

void SyntheticClassSpec::validate() const {
    if (id.empty()) throw ConfigError("class id must be non-empty");
    if (!(min_area > 0.001 && max_area < 0.25 && min_area < max_area))
        throw ConfigError("class " + id + ": defect area range must lie inside (0.001, 0.25)");
    if (!(anomaly_rate >= 0.0 && anomaly_rate <= 1.0)) throw ConfigError("class " + id + ": anomaly_rate outside [0, 1]");
    if (!(scale > 0.0)) throw ConfigError("class " + id + ": scale must be positive");
}

std::vector<SyntheticClassSpec> default_class_specs() {
    return {
        {"A", Texture::checker, {0.15, 0.25, 0.55}, {0.85, 0.80, 0.60}, 8.0, Defect::scratch, 0.005, 0.08, 0.5},
        {"B", Texture::stripes, {0.60, 0.20, 0.20}, {0.55, 0.55, 0.35}, 10.0, Defect::hole, 0.005, 0.08, 0.5},
        {"C", Texture::blobs, {0.30, 0.55, 0.30}, {0.80, 0.90, 0.50}, 7.0, Defect::blotch, 0.005, 0.08, 0.5},
        {"D", Texture::gradient, {0.25, 0.35, 0.70}, {0.90, 0.60, 0.30}, 1.0, Defect::blotch, 0.005, 0.08, 0.5},
        {"E", Texture::cellular, {0.35, 0.30, 0.25}, {0.85, 0.85, 0.90}, 14.0, Defect::scratch, 0.005, 0.08, 0.5},
    };
}

const SyntheticClassSpec& find_spec(const std::vector<SyntheticClassSpec>& specs, const std::string& id) {
    for (const auto& s : specs)
        if (s.id == id) return s;
    throw ConfigError("unknown class id '" + id + "'");
}

std::vector<std::string> DatasetManifest::classes() const {
    std::vector<std::string> out;
    for (const auto& e : entries)
        if (std::find(out.begin(), out.end(), e.cls) == out.end()) out.push_back(e.cls);
    return out;
}

namespace {

struct Canvas {
    std::size_t h, w;
    Tensor t;
    Canvas(std::size_t h_, std::size_t w_) : h(h_), w(w_), t({h_, w_, 3}) {}
    double* px(std::size_t y, std::size_t x) { return t.data() + (y * w + x) * 3; }
    const double* px(std::size_t y, std::size_t x) const { return t.data() + (y * w + x) * 3; }
};

Color jitter(const Color& c, Rng& rng, double amount) {
    Color out;
    for (int i = 0; i < 3; ++i) out[i] = std::clamp(c[i] + rng.uniform(-amount, amount), 0.0, 1.0);
    return out;
}

void put(double* p, const Color& a, const Color& b, double t) {
    for (int i = 0; i < 3; ++i) p[i] = a[i] + (b[i] - a[i]) * t;
}

Canvas render_texture(const SyntheticClassSpec& spec, Rng& rng, std::size_t h, std::size_t w) {
    Canvas c(h, w);
    const Color a = jitter(spec.color_a, rng, 0.05), b = jitter(spec.color_b, rng, 0.05);
    const double two_pi = 2.0 * std::numbers::pi;
    switch (spec.texture) {
        case Texture::checker: {
            const double cell = spec.scale * rng.uniform(0.8, 1.2);
            const double ox = rng.uniform(0, cell), oy = rng.uniform(0, cell);
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    const long cx = static_cast<long>(std::floor((static_cast<double>(x) + ox) / cell));
                    const long cy = static_cast<long>(std::floor((static_cast<double>(y) + oy) / cell));
                    put(c.px(y, x), a, b, ((cx + cy) % 2 == 0) ? 0.0 : 1.0);
                }
            break;
        }
        case Texture::stripes: {
            const double period = spec.scale * rng.uniform(0.8, 1.2);
            const double angle = rng.uniform(-0.4, 0.4) + std::numbers::pi / 4;
            const double phase = rng.uniform(0, period);
            const double ca = std::cos(angle), sa = std::sin(angle);
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    const double t = (static_cast<double>(x) * ca + static_cast<double>(y) * sa + phase) / period;
                    put(c.px(y, x), a, b, 0.5 + 0.5 * std::sin(two_pi * t));
                }
            break;
        }
        case Texture::blobs: {
            const std::size_t k = 6 + rng.index(5);
            std::vector<std::array<double, 3>> blobs(k);
            for (auto& bl : blobs)
                bl = {rng.uniform(0, static_cast<double>(w)), rng.uniform(0, static_cast<double>(h)),
                      spec.scale * rng.uniform(0.6, 1.4)};
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    double m = 0.0;
                    for (const auto& [bx, by, r] : blobs) {
                        const double dx = static_cast<double>(x) - bx, dy = static_cast<double>(y) - by;
                        m = std::max(m, std::exp(-(dx * dx + dy * dy) / (2 * r * r)));
                    }
                    put(c.px(y, x), a, b, m);
                }
            break;
        }
        case Texture::gradient: {
            const double angle = rng.uniform(0, two_pi);
            const double ca = std::cos(angle), sa = std::sin(angle);
            const double hx = static_cast<double>(w - 1) / 2, hy = static_cast<double>(h - 1) / 2;
            const double span = std::abs(ca) * hx + std::abs(sa) * hy;
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    const double proj = (static_cast<double>(x) - hx) * ca + (static_cast<double>(y) - hy) * sa;
                    put(c.px(y, x), a, b, 0.5 + 0.5 * proj / span);
                }
            break;
        }
        case Texture::cellular: {
            const std::size_t k = 12 + rng.index(9);
            std::vector<std::pair<double, double>> pts(k);
            for (auto& p : pts) p = {rng.uniform(0, static_cast<double>(w)), rng.uniform(0, static_cast<double>(h))};
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    double best = 1e30;
                    for (const auto& [px, py] : pts) {
                        const double dx = static_cast<double>(x) - px, dy = static_cast<double>(y) - py;
                        best = std::min(best, dx * dx + dy * dy);
                    }
                    put(c.px(y, x), a, b, std::min(1.0, std::sqrt(best) / spec.scale));
                }
            break;
        }
    }
    for (double& v : c.t.values()) v = std::clamp(v + rng.normal(0.0, 0.015), 0.0, 1.0);
    return c;
}

// Random palette colour that stands apart from both texture colours.
Color contrast_color(const SyntheticClassSpec& spec, Rng& rng) {
    static const Color palette[] = {{0.03, 0.03, 0.03}, {0.97, 0.97, 0.97}, {0.9, 0.1, 0.1},
                                    {0.9, 0.1, 0.8},    {0.1, 0.8, 0.9},    {0.95, 0.9, 0.1}};
    auto dist = [](const Color& x, const Color& y) {
        double d = 0;
        for (int i = 0; i < 3; ++i) d += (x[i] - y[i]) * (x[i] - y[i]);
        return d;
    };
    std::vector<const Color*> ok;
    for (const auto& p : palette)
        if (std::min(dist(p, spec.color_a), dist(p, spec.color_b)) > 0.3) ok.push_back(&p);
    if (ok.empty()) ok.push_back(&palette[0]);
    return jitter(*ok[rng.index(ok.size())], rng, 0.03);
}

double segment_distance(double x, double y, double x0, double y0, double x1, double y1) {
    const double dx = x1 - x0, dy = y1 - y0;
    const double len2 = dx * dx + dy * dy;
    const double t = len2 > 0 ? std::clamp(((x - x0) * dx + (y - y0) * dy) / len2, 0.0, 1.0) : 0.0;
    const double ex = x0 + t * dx - x, ey = y0 + t * dy - y;
    return std::sqrt(ex * ex + ey * ey);
}

// Paints one defect attempt; returns the mask.
Tensor paint_defect(const SyntheticClassSpec& spec, Canvas& c, const Canvas& clean, Rng& rng) {
    const std::size_t h = c.h, w = c.w;
    const double fh = static_cast<double>(h), fw = static_cast<double>(w);
    Tensor mask({h, w});
    switch (spec.defect) {
        case Defect::scratch: {
            const double x0 = rng.uniform(8, fw - 8), y0 = rng.uniform(8, fh - 8);
            const double ang = rng.uniform(0, 2 * std::numbers::pi), len = rng.uniform(0.35, 0.7) * fw;
            const double x1 = x0 + len * std::cos(ang), y1 = y0 + len * std::sin(ang);
            const double thick = rng.uniform(1.2, 2.2);
            const Color col = contrast_color(spec, rng);
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x)
                    if (segment_distance(static_cast<double>(x), static_cast<double>(y), x0, y0, x1, y1) <= thick) {
                        mask.at(y, x) = 1;
                        put(c.px(y, x), col, col, 0);
                    }
            break;
        }
        case Defect::blotch: {
            const double cx = rng.uniform(10, fw - 10), cy = rng.uniform(10, fh - 10);
            const double rx = rng.uniform(4, 9), ry = rng.uniform(4, 9);
            const double p1 = rng.uniform(0, 6.3), p2 = rng.uniform(0, 6.3);
            const Color col = contrast_color(spec, rng);
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    const double dx = (static_cast<double>(x) - cx) / rx, dy = (static_cast<double>(y) - cy) / ry;
                    const double th = std::atan2(dy, dx);
                    const double edge = 1.0 + 0.2 * std::sin(3 * th + p1) + 0.1 * std::sin(5 * th + p2);
                    if (std::sqrt(dx * dx + dy * dy) <= edge) {
                        mask.at(y, x) = 1;
                        const double* base = clean.px(y, x);
                        put(c.px(y, x), {base[0], base[1], base[2]}, col, 0.8);
                    }
                }
            break;
        }
        case Defect::hole: {
            const double cx = rng.uniform(8, fw - 8), cy = rng.uniform(8, fh - 8), r = rng.uniform(3, 7);
            const double shade = rng.uniform(0.02, 0.08);
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
                    if (dx * dx + dy * dy <= r * r) {
                        mask.at(y, x) = 1;
                        put(c.px(y, x), {shade, shade, shade}, {shade, shade, shade}, 0);
                    }
                }
            break;
        }
        case Defect::swap_patch: {
            const std::size_t s = 8 + rng.index(9);
            const std::size_t ty = rng.index(h - s), tx = rng.index(w - s);
            const std::size_t sy = rng.index(h - s), sx = rng.index(w - s);
            // Source patch rotated by 90 degrees and colour-inverted.
            for (std::size_t y = 0; y < s; ++y)
                for (std::size_t x = 0; x < s; ++x) {
                    const double* src = clean.px(sy + x, sx + (s - 1 - y));
                    double* dst = c.px(ty + y, tx + x);
                    for (int k = 0; k < 3; ++k) dst[k] = 1.0 - src[k];
                    mask.at(ty + y, tx + x) = 1;
                }
            break;
        }
    }
    return mask;
}

}  // namespace

RenderedSample render_sample(const SyntheticClassSpec& spec, std::size_t index, bool anomalous, std::uint64_t seed,
                             std::size_t h, std::size_t w) {
    spec.validate();
    Rng rng(derive_seed(seed, "sample:" + spec.id + ":" + std::to_string(index)));
    Canvas clean = render_texture(spec, rng, h, w);
    RenderedSample out;
    out.clean = clean.t;
    out.image = clean.t;
    out.mask = Tensor({h, w});
    if (!anomalous) return out;

    const double area = static_cast<double>(h * w);
    for (int attempt = 0; attempt < 200; ++attempt) {
        Canvas c = clean;
        Tensor mask = paint_defect(spec, c, clean, rng);
        double on = 0, diff = 0;
        for (std::size_t p = 0; p < h * w; ++p) {
            if (mask[p] == 0) continue;
            on += 1;
            for (int k = 0; k < 3; ++k) diff += std::abs(c.t[p * 3 + k] - clean.t[p * 3 + k]) / 3.0;
        }
        const double frac = on / area;
        if (frac < spec.min_area || frac > spec.max_area || diff / std::max(on, 1.0) < 0.1) continue;
        out.image = c.t;
        out.mask = mask;
        out.label = 1;
        return out;
    }
    throw DatasetError("class " + spec.id + ": could not place a defect within the area range");
}

std::vector<bool> anomaly_plan(const SyntheticClassSpec& spec, std::size_t n, std::uint64_t seed) {
    const auto k = static_cast<std::size_t>(std::llround(spec.anomaly_rate * static_cast<double>(n)));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, "plan:" + spec.id));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    std::vector<bool> plan(n, false);
    for (std::size_t i = 0; i < k; ++i) plan[order[i]] = true;
    return plan;
}

DatasetManifest generate_synthetic_dataset(const std::vector<SyntheticClassSpec>& specs, std::size_t n_per_class,
                                           std::uint64_t seed, const fs::path& out_dir, const std::string& split,
                                           std::size_t h, std::size_t w) {
    if (specs.empty()) throw ConfigError("no class specs given");
    for (const auto& s : specs) s.validate();
    std::error_code ec;
    fs::create_directories(out_dir / "images", ec);
    if (!ec) fs::create_directories(out_dir / "masks", ec);
    if (ec) throw DatasetError("cannot create " + out_dir.string() + ": " + ec.message());

    DatasetManifest m;
    m.root = out_dir;
    m.split = split;
    for (const auto& spec : specs) {
        const auto plan = anomaly_plan(spec, n_per_class, seed);
        for (std::size_t i = 0; i < n_per_class; ++i) {
            const RenderedSample s = render_sample(spec, i, plan[i], seed, h, w);
            char name[64];
            std::snprintf(name, sizeof name, "%s_%03zu", spec.id.c_str(), i);
            ManifestEntry e;
            e.image = std::string("images/") + name + ".png";
            e.label = s.label;
            e.cls = spec.id;
            write_png_rgb(s.image, out_dir / e.image);
            if (s.label) {
                e.mask = std::string("masks/") + name + "_mask.png";
                write_png_gray(s.mask, out_dir / *e.mask);
            }
            m.entries.push_back(std::move(e));
        }
    }
    write_manifest(m, out_dir / (split + ".json"));
    return m;
}

void write_manifest(const DatasetManifest& manifest, const fs::path& path) {
    nlohmann::json j;
    j["split"] = manifest.split;
    j["entries"] = nlohmann::json::array();
    for (const auto& e : manifest.entries) {
        j["entries"].push_back({{"image", e.image},
                                {"mask", e.mask ? nlohmann::json(*e.mask) : nlohmann::json(nullptr)},
                                {"label", e.label},
                                {"class", e.cls}});
    }
    std::ofstream os(path);
    if (!os) throw DatasetError("cannot write manifest " + path.string());
    os << j.dump(2) << '\n';
    if (!os) throw DatasetError("failed writing manifest " + path.string());
}

DatasetManifest read_manifest(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw DatasetError("cannot open manifest " + path.string());
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DatasetError("malformed manifest " + path.string() + ": " + e.what());
    }
    DatasetManifest m;
    m.root = path.parent_path();
    try {
        m.split = j.at("split").get<std::string>();
        for (const auto& o : j.at("entries")) {
            ManifestEntry e;
            e.image = o.at("image").get<std::string>();
            if (!o.at("mask").is_null()) e.mask = o.at("mask").get<std::string>();
            e.label = o.at("label").get<int>();
            e.cls = o.at("class").get<std::string>();
            if (e.label != 0 && e.label != 1) throw ValidationError(e.image + ": label must be 0 or 1");
            m.entries.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DatasetError("manifest " + path.string() + " does not match the schema: " + e.what());
    }
    return m;
}

std::vector<DatasetItem> load_dataset(const fs::path& manifest_path, std::optional<std::uint64_t> shuffle_seed) {
    const DatasetManifest m = read_manifest(manifest_path);
    std::vector<DatasetItem> items;
    items.reserve(m.entries.size());
    for (const auto& e : m.entries) {
        DatasetItem it;
        it.path = (m.root / e.image).string();
        it.image = read_png_rgb(m.root / e.image);
        it.label = e.label;
        it.cls = e.cls;
        if (e.mask) {
            if (!e.label) throw ValidationError(e.image + ": normal entry carries a mask");
            Tensor raw = read_png_gray(m.root / *e.mask);
            double on = 0;
            for (double& v : raw.values()) {
                v = v >= 0.5 ? 1.0 : 0.0;
                on += v;
            }
            if (on == 0) throw ValidationError(*e.mask + ": anomalous mask has no positive pixel");
            if (raw.shape()[0] != it.image.shape()[0] || raw.shape()[1] != it.image.shape()[1])
                throw ValidationError(*e.mask + ": mask size differs from its image");
            it.mask = std::move(raw);
        } else if (e.label) {
            throw ValidationError(e.image + ": anomalous entry lacks a mask");
        }
        items.push_back(std::move(it));
    }
    if (shuffle_seed) {
        Rng rng(derive_seed(*shuffle_seed, "shuffle"));
        for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[rng.index(i)]);
    }
    return items;
}

void check_class_disjoint(const std::vector<std::string>& train, const std::vector<std::string>& test) {
    const std::set<std::string> a(train.begin(), train.end());
    for (const auto& c : test)
        if (a.count(c)) throw ValidationError("class '" + c + "' appears in both training and test splits");
}

std::uint8_t to_byte(double v) {
    if (!(v >= 0.0 && v <= 1.0)) throw InputError("pixel value outside [0, 1]");
    return static_cast<std::uint8_t>(std::floor(255.0 * v + 0.5));
}

namespace {

void write_png(const std::vector<std::uint8_t>& bytes, std::size_t h, std::size_t w, bool rgb, const fs::path& path) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(w);
    img.height = static_cast<png_uint_32>(h);
    img.format = rgb ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&img, path.c_str(), 0, bytes.data(), 0, nullptr)) {
        const std::string msg = img.message;
        png_image_free(&img);
        throw DatasetError("cannot write " + path.string() + ": " + msg);
    }
}

std::vector<std::uint8_t> read_png(const fs::path& path, bool rgb, std::size_t& h, std::size_t& w) {
    if (!fs::exists(path)) throw DatasetError("missing file " + path.string());
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.c_str()))
        throw DatasetError("cannot read " + path.string() + ": " + img.message);
    img.format = rgb ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, bytes.data(), 0, nullptr)) {
        const std::string msg = img.message;
        png_image_free(&img);
        throw DatasetError("cannot decode " + path.string() + ": " + msg);
    }
    h = img.height;
    w = img.width;
    return bytes;
}

}  // namespace

void write_png_rgb(const Tensor& image, const fs::path& path) {
    if (image.rank() != 3 || image.shape()[2] != 3) throw InputError("RGB image must be [h x w x 3]");
    std::vector<std::uint8_t> bytes(image.size());
    for (std::size_t i = 0; i < image.size(); ++i) bytes[i] = to_byte(image[i]);
    write_png(bytes, image.shape()[0], image.shape()[1], true, path);
}

void write_png_gray(const Tensor& image, const fs::path& path) {
    if (image.rank() != 2) throw InputError("gray image must be [h x w]");
    std::vector<std::uint8_t> bytes(image.size());
    for (std::size_t i = 0; i < image.size(); ++i) bytes[i] = to_byte(image[i]);
    write_png(bytes, image.rows(), image.cols(), false, path);
}

Tensor read_png_rgb(const fs::path& path) {
    std::size_t h = 0, w = 0;
    const auto bytes = read_png(path, true, h, w);
    Tensor t({h, w, 3});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = bytes[i] / 255.0;
    return t;
}

Tensor read_png_gray(const fs::path& path) {
    std::size_t h = 0, w = 0;
    const auto bytes = read_png(path, false, h, w);
    Tensor t({h, w});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = bytes[i] / 255.0;
    return t;
}

void write_anomaly_map_image(const Tensor& map, const fs::path& path) { write_png_gray(map, path); }

}  // namespace pmoe
