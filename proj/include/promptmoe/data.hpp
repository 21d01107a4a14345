#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "promptmoe/tensor.hpp"

namespace pmoe {

enum class Texture { checker, stripes, blobs, gradient, cellular };
enum class Defect { scratch, blotch, hole, swap_patch };

const char* texture_name(Texture t);
const char* defect_name(Defect d);
Texture parse_texture(const std::string& s);
Defect parse_defect(const std::string& s);

using Color = std::array<double, 3>;

struct SyntheticClassSpec {
    std::string id;
    Texture texture = Texture::checker;
    Color color_a{0.2, 0.2, 0.2};
    Color color_b{0.8, 0.8, 0.8};
    double scale = 8.0;  // cell size / period / blob radius in pixels
    Defect defect = Defect::scratch;
    double min_area = 0.005;  // defect area as a fraction of the image
    double max_area = 0.08;
    double anomaly_rate = 0.5;

    void validate() const;
};

// Five texture families A..E; A-C are the training classes, D-E unseen.
std::vector<SyntheticClassSpec> default_class_specs();
const SyntheticClassSpec& find_spec(const std::vector<SyntheticClassSpec>& specs, const std::string& id);

struct ManifestEntry {
    std::string image;               // relative to the manifest directory
    std::optional<std::string> mask; // present iff label == 1
    int label = 0;
    std::string cls;
};

struct DatasetManifest {
    std::filesystem::path root;  // directory holding the manifest
    std::string split;
    std::vector<ManifestEntry> entries;

    std::vector<std::string> classes() const;
};

struct RenderedSample {
    Tensor image;  // [h × w × 3] in [0, 1]
    Tensor clean;  // the same render without the defect
    Tensor mask;   // [h × w] binary
    int label = 0;
};

// Pure function of (spec, index, seed).
RenderedSample render_sample(const SyntheticClassSpec& spec, std::size_t index, bool anomalous, std::uint64_t seed,
                             std::size_t h = 64, std::size_t w = 64);

// Which of the n samples of a class are anomalous (exactly round(n·rate)).
std::vector<bool> anomaly_plan(const SyntheticClassSpec& spec, std::size_t n, std::uint64_t seed);

// Writes PNGs under out_dir/{images,masks} and out_dir/<split>.json.
DatasetManifest generate_synthetic_dataset(const std::vector<SyntheticClassSpec>& specs, std::size_t n_per_class,
                                           std::uint64_t seed, const std::filesystem::path& out_dir,
                                           const std::string& split, std::size_t h = 64, std::size_t w = 64);

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);

struct DatasetItem {
    Tensor image;  // [h × w × 3] in [0, 1]
    Tensor mask;   // [h × w]; empty for normal entries
    int label = 0;
    std::string cls;
    std::string path;
};

// Loads every entry in manifest order, or a seeded permutation of it.
std::vector<DatasetItem> load_dataset(const std::filesystem::path& manifest_path,
                                      std::optional<std::uint64_t> shuffle_seed = std::nullopt);

// Hard failure when the two class sets intersect.
void check_class_disjoint(const std::vector<std::string>& train, const std::vector<std::string>& test);

// PNG helpers. RGB images are [h × w × 3], gray images [h × w]; values in
// [0, 1] are stored as round-half-up(255·v).
void write_png_rgb(const Tensor& image, const std::filesystem::path& path);
void write_png_gray(const Tensor& image, const std::filesystem::path& path);
Tensor read_png_rgb(const std::filesystem::path& path);
Tensor read_png_gray(const std::filesystem::path& path);

void write_anomaly_map_image(const Tensor& map, const std::filesystem::path& path);

std::uint8_t to_byte(double v);

}  // namespace pmoe
