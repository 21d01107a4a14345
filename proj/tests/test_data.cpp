#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include "doctest.h"
#include "json.hpp"
#include "promptmoe/data.hpp"
#include "promptmoe/error.hpp"

using namespace pmoe;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) : path(fs::temp_directory_path() / ("pmoe_test_" + tag)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), {}};
}

std::vector<SyntheticClassSpec> two_specs() {
    auto all = default_class_specs();
    return {all[0], all[3]};
}

}  // namespace

TEST_SUITE("class specs") {
    TEST_CASE("five default families, A-C seen and D-E unseen") {
        const auto specs = default_class_specs();
        REQUIRE(specs.size() == 5);
        const char* ids[] = {"A", "B", "C", "D", "E"};
        std::set<Texture> textures;
        for (std::size_t i = 0; i < 5; ++i) {
            CHECK(specs[i].id == ids[i]);
            CHECK_NOTHROW(specs[i].validate());
            textures.insert(specs[i].texture);
        }
        CHECK(textures.size() == 5);
        CHECK(find_spec(specs, "C").id == "C");
        CHECK_THROWS_AS(find_spec(specs, "Z"), ConfigError);
    }

    TEST_CASE("name round trips and validation") {
        for (Texture t : {Texture::checker, Texture::stripes, Texture::blobs, Texture::gradient, Texture::cellular})
            CHECK(parse_texture(texture_name(t)) == t);
        for (Defect d : {Defect::scratch, Defect::blotch, Defect::hole, Defect::swap_patch})
            CHECK(parse_defect(defect_name(d)) == d);
        CHECK_THROWS_AS(parse_texture("plaid"), ConfigError);
        SyntheticClassSpec s;
        s.id = "X";
        s.max_area = 0.5;
        CHECK_THROWS_AS(s.validate(), ConfigError);
    }
}

TEST_SUITE("rendering") {
    TEST_CASE("anomaly plan has exactly round(n*rate) anomalies") {
        auto spec = default_class_specs()[1];
        for (std::size_t n : {10u, 40u, 7u}) {
            const auto plan = anomaly_plan(spec, n, 3);
            CHECK(static_cast<std::size_t>(std::count(plan.begin(), plan.end(), true)) ==
                  static_cast<std::size_t>(std::llround(0.5 * n)));
        }
        CHECK(anomaly_plan(spec, 40, 3) == anomaly_plan(spec, 40, 3));
    }

    TEST_CASE("defect area within range and defects visible") {
        for (const auto& spec : default_class_specs())
            for (std::size_t i = 0; i < 12; ++i) {
                const RenderedSample s = render_sample(spec, i, true, 5);
                double on = 0;
                for (double v : s.mask.values()) {
                    CHECK((v == 0.0 || v == 1.0));
                    on += v;
                }
                const double frac = on / (64.0 * 64.0);
                CHECK(frac >= spec.min_area);
                CHECK(frac <= spec.max_area);
                CHECK(s.label == 1);
                CHECK(max_abs_diff(s.image, s.clean) > 0.1);
                for (double v : s.image.values()) {
                    CHECK(v >= 0.0);
                    CHECK(v <= 1.0);
                }
            }
    }

    TEST_CASE("normal samples are clean and deterministic") {
        const auto spec = default_class_specs()[2];
        const RenderedSample a = render_sample(spec, 4, false, 9), b = render_sample(spec, 4, false, 9);
        CHECK(a.image == b.image);
        CHECK(a.image == a.clean);
        CHECK(a.label == 0);
        for (double v : a.mask.values()) CHECK(v == 0.0);
        CHECK(max_abs_diff(a.image, render_sample(spec, 5, false, 9).image) > 0.0);
    }
}

TEST_SUITE("dataset files") {
    TEST_CASE("counts, determinism and round trip") {
        TempDir a("gen_a"), b("gen_b");
        const auto specs = two_specs();
        const DatasetManifest m = generate_synthetic_dataset(specs, 10, 4, a.path, "test");
        generate_synthetic_dataset(specs, 10, 4, b.path, "test");
        CHECK(m.entries.size() == 20);
        CHECK(m.classes() == std::vector<std::string>{"A", "D"});
        for (const auto& cls : m.classes()) {
            int anomalous = 0, total = 0;
            for (const auto& e : m.entries)
                if (e.cls == cls) {
                    ++total;
                    anomalous += e.label;
                    CHECK(e.mask.has_value() == (e.label == 1));
                }
            CHECK(total == 10);
            CHECK(anomalous == 5);
        }
        CHECK(slurp(a.path / "test.json") == slurp(b.path / "test.json"));
        for (const auto& e : m.entries) {
            CHECK(slurp(a.path / e.image) == slurp(b.path / e.image));
            if (e.mask) CHECK(slurp(a.path / *e.mask) == slurp(b.path / *e.mask));
        }

        const auto items = load_dataset(a.path / "test.json");
        REQUIRE(items.size() == 20);
        std::size_t idx = 0;
        for (const auto& spec : specs) {
            const auto plan = anomaly_plan(spec, 10, 4);
            for (std::size_t i = 0; i < 10; ++i, ++idx) {
                const RenderedSample s = render_sample(spec, i, plan[i], 4);
                const DatasetItem& it = items[idx];
                CHECK(it.cls == spec.id);
                CHECK(it.label == s.label);
                bool same = true;
                for (std::size_t p = 0; p < s.image.size(); ++p)
                    same = same && it.image[p] == static_cast<double>(to_byte(s.image[p])) / 255.0;
                CHECK(same);
                if (it.label) {
                    CHECK(it.mask == s.mask);
                } else {
                    CHECK(it.mask.empty());
                }
            }
        }
    }

    TEST_CASE("shuffled load is a permutation") {
        TempDir d("shuffle");
        generate_synthetic_dataset(two_specs(), 6, 1, d.path, "train");
        const auto plain = load_dataset(d.path / "train.json");
        const auto s1 = load_dataset(d.path / "train.json", 7), s2 = load_dataset(d.path / "train.json", 7);
        std::vector<std::string> p0, p1, p2;
        for (const auto& it : plain) p0.push_back(it.path);
        for (const auto& it : s1) p1.push_back(it.path);
        for (const auto& it : s2) p2.push_back(it.path);
        CHECK(p1 == p2);
        CHECK(p1 != p0);
        std::sort(p0.begin(), p0.end());
        std::sort(p1.begin(), p1.end());
        CHECK(p0 == p1);
    }

    TEST_CASE("missing files and inconsistent entries") {
        TempDir d("bad");
        generate_synthetic_dataset(two_specs(), 2, 1, d.path, "test");
        const fs::path mp = d.path / "test.json";
        nlohmann::json j = nlohmann::json::parse(slurp(mp));
        auto write = [&](const nlohmann::json& v) { std::ofstream(mp) << v.dump(); };

        nlohmann::json broken = j;
        broken["entries"][0]["image"] = "images/nope.png";
        write(broken);
        try {
            load_dataset(mp);
            FAIL("expected an error");
        } catch (const DatasetError& e) {
            CHECK(std::string(e.what()).find("nope.png") != std::string::npos);
        }

        std::size_t anomalous = 0, normal = 0;
        for (std::size_t i = 0; i < j["entries"].size(); ++i) (j["entries"][i]["label"] == 1 ? anomalous : normal) = i;
        broken = j;
        broken["entries"][anomalous]["mask"] = nullptr;
        write(broken);
        CHECK_THROWS_AS(load_dataset(mp), ValidationError);
        broken = j;
        broken["entries"][normal]["mask"] = j["entries"][anomalous]["mask"];
        write(broken);
        CHECK_THROWS_AS(load_dataset(mp), ValidationError);
        broken = j;
        broken["entries"][normal]["label"] = 3;
        write(broken);
        CHECK_THROWS_AS(load_dataset(mp), ValidationError);
        std::ofstream(mp) << "{not json";
        CHECK_THROWS_AS(load_dataset(mp), DatasetError);
        CHECK_THROWS_AS(load_dataset(d.path / "absent.json"), DatasetError);
    }

    TEST_CASE("unwritable output directory") {
        TempDir d("blocked");
        std::ofstream(d.path / "file") << "x";
        CHECK_THROWS_AS(generate_synthetic_dataset(two_specs(), 2, 1, d.path / "file" / "sub", "test"), DatasetError);
    }
}

TEST_SUITE("png") {
    TEST_CASE("anomaly map rounding") {
        TempDir d("png");
        for (auto [v, byte] : {std::pair{0.0, 0}, {1.0, 255}, {0.5, 128}}) {
            Tensor m({3, 4});
            m.fill(v);
            write_anomaly_map_image(m, d.path / "m.png");
            const Tensor back = read_png_gray(d.path / "m.png");
            for (double x : back.values()) CHECK(x == byte / 255.0);
        }
        CHECK(to_byte(0.5) == 128);
        CHECK(to_byte(0.49 / 255.0 + 0.0) == 0);
        CHECK(to_byte(1.5 / 255.0) == 2);
        CHECK_THROWS_AS(to_byte(1.2), InputError);
    }

    TEST_CASE("rgb round trip is exact on byte values") {
        TempDir d("rgb");
        Rng rng(2);
        Tensor img({5, 7, 3});
        for (double& v : img.values()) v = static_cast<double>(rng.index(256)) / 255.0;
        write_png_rgb(img, d.path / "x.png");
        CHECK(read_png_rgb(d.path / "x.png") == img);
        CHECK_THROWS_AS(write_png_rgb(Tensor({5, 7}), d.path / "y.png"), InputError);
    }
}

TEST_SUITE("splits") {
    TEST_CASE("class disjointness") {
        CHECK_NOTHROW(check_class_disjoint({"A", "B", "C"}, {"D", "E"}));
        CHECK_THROWS_AS(check_class_disjoint({"A", "B", "C"}, {"C", "E"}), ValidationError);
    }
}
