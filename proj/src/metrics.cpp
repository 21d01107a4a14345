#include "promptmoe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>

#include "promptmoe/error.hpp"

namespace pmoe {

namespace {

void check_inputs(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw InputError("scores and labels differ in length");
    for (double s : scores)
        if (!std::isfinite(s)) throw InputError("non-finite score");
}

// Indices sorted by descending score (stable for determinism).
std::vector<std::size_t> descending(std::span<const double> scores) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return idx;
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const int> labels) {
    check_inputs(scores, labels);
    double pos = 0, neg = 0;
    for (int l : labels) (l ? pos : neg) += 1;
    if (pos == 0 || neg == 0) throw UndefinedMetricError("AUROC needs both positive and negative samples");

    const auto idx = descending(scores);
    // Walk tie groups from the top; each negative beats every positive that
    // scored strictly higher and ties the positives in its own group.
    double concordant = 0, pos_above = 0;
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        double gp = 0, gn = 0;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
            (labels[idx[j]] ? gp : gn) += 1;
            ++j;
        }
        concordant += gn * (pos_above + 0.5 * gp);
        pos_above += gp;
        i = j;
    }
    return concordant / (pos * neg);
}

double average_precision(std::span<const double> scores, std::span<const int> labels) {
    check_inputs(scores, labels);
    double pos = 0;
    for (int l : labels) pos += l ? 1 : 0;
    if (pos == 0) throw UndefinedMetricError("average precision needs at least one positive");

    const auto idx = descending(scores);
    double tp = 0, seen = 0, prev_recall = 0, ap = 0;
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
            tp += labels[idx[j]] ? 1 : 0;
            seen += 1;
            ++j;
        }
        const double recall = tp / pos;
        ap += (recall - prev_recall) * (tp / seen);
        prev_recall = recall;
        i = j;
    }
    return ap;
}

namespace {

void check_pairs(const std::vector<Tensor>& maps, const std::vector<Tensor>& masks) {
    if (maps.size() != masks.size()) throw InputError("maps and masks differ in count");
    for (std::size_t i = 0; i < maps.size(); ++i)
        if (maps[i].shape() != masks[i].shape())
            throw InputError("map " + std::to_string(i) + " shape " + shape_string(maps[i].shape()) +
                             " does not match its mask " + shape_string(masks[i].shape()));
}

}  // namespace

double pixel_auroc(const std::vector<Tensor>& maps, const std::vector<Tensor>& masks) {
    check_pairs(maps, masks);
    std::vector<double> scores;
    std::vector<int> labels;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        scores.insert(scores.end(), maps[i].values().begin(), maps[i].values().end());
        for (double m : masks[i].values()) labels.push_back(m > 0.5 ? 1 : 0);
    }
    return auroc(scores, labels);
}

std::vector<int> label_components(const Tensor& mask, int* count) {
    if (mask.rank() != 2) throw DimensionError("mask must be 2-D");
    const std::size_t h = mask.rows(), w = mask.cols(), n = h * w;
    // Union-find over foreground pixels, merging with the four already-seen
    // 8-neighbours (W, NW, N, NE).
    std::vector<std::size_t> parent(n);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](std::size_t x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    };
    auto unite = [&](std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
    };
    auto fg = [&](std::size_t y, std::size_t x) { return mask[y * w + x] > 0.5; };
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            if (!fg(y, x)) continue;
            const std::size_t p = y * w + x;
            if (x > 0 && fg(y, x - 1)) unite(p, p - 1);
            if (y > 0) {
                if (x > 0 && fg(y - 1, x - 1)) unite(p, p - w - 1);
                if (fg(y - 1, x)) unite(p, p - w);
                if (x + 1 < w && fg(y - 1, x + 1)) unite(p, p - w + 1);
            }
        }
    std::vector<int> labels(n, 0), root_label(n, 0);
    int next = 0;
    for (std::size_t p = 0; p < n; ++p) {
        if (!(mask[p] > 0.5)) continue;
        const std::size_t r = find(p);
        if (!root_label[r]) root_label[r] = ++next;
        labels[p] = root_label[r];
    }
    if (count) *count = next;
    return labels;
}

double pro_score(const std::vector<Tensor>& maps, const std::vector<Tensor>& masks, double fpr_limit,
                 std::size_t num_thresholds) {
    check_pairs(maps, masks);
    if (!(fpr_limit > 0.0 && fpr_limit <= 1.0)) throw ParameterError("fpr_limit must lie in (0, 1]");

    // Pixels tagged with a global component id (-1 for normal pixels).
    struct Pixel {
        double value;
        int comp;
    };
    std::vector<Pixel> pixels;
    std::vector<double> comp_size;
    double normals = 0;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        int count = 0;
        const auto labels = label_components(masks[i], &count);
        const int base = static_cast<int>(comp_size.size());
        comp_size.resize(comp_size.size() + static_cast<std::size_t>(count), 0.0);
        for (std::size_t p = 0; p < labels.size(); ++p) {
            const double v = maps[i][p];
            if (!std::isfinite(v)) throw InputError("non-finite anomaly map value");
            const int c = labels[p] ? base + labels[p] - 1 : -1;
            if (c >= 0)
                comp_size[static_cast<std::size_t>(c)] += 1;
            else
                normals += 1;
            pixels.push_back({v, c});
        }
    }
    if (comp_size.empty()) throw UndefinedMetricError("PRO needs at least one anomalous region");
    if (normals == 0) throw UndefinedMetricError("PRO needs normal pixels to measure false positives");

    std::stable_sort(pixels.begin(), pixels.end(), [](const Pixel& a, const Pixel& b) { return a.value > b.value; });

    std::vector<double> thresholds;
    if (num_thresholds == 0) {
        for (const auto& p : pixels)
            if (thresholds.empty() || p.value != thresholds.back()) thresholds.push_back(p.value);
    } else {
        // Evenly spaced quantiles of the pooled values, highest first.
        const std::size_t n = pixels.size();
        for (std::size_t i = 0; i < num_thresholds; ++i) {
            const double q = num_thresholds == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(num_thresholds - 1);
            const auto pos = static_cast<std::size_t>(std::llround(q * static_cast<double>(n - 1)));
            const double t = pixels[pos].value;
            if (thresholds.empty() || t < thresholds.back()) thresholds.push_back(t);
        }
    }

    const double n_comp = static_cast<double>(comp_size.size());
    std::vector<double> detected(comp_size.size(), 0.0);
    double overlap_sum = 0, fp = 0;
    std::vector<std::pair<double, double>> curve{{0.0, 0.0}};
    std::size_t cursor = 0;
    for (double t : thresholds) {
        while (cursor < pixels.size() && pixels[cursor].value >= t) {
            const int c = pixels[cursor].comp;
            if (c < 0) {
                fp += 1;
            } else {
                const auto ci = static_cast<std::size_t>(c);
                detected[ci] += 1;
                overlap_sum += 1.0 / comp_size[ci];
            }
            ++cursor;
        }
        curve.emplace_back(fp / normals, overlap_sum / n_comp);
    }

    double area = 0;
    for (std::size_t i = 1; i < curve.size(); ++i) {
        const auto [x0, y0] = curve[i - 1];
        auto [x1, y1] = curve[i];
        if (x0 >= fpr_limit) break;
        if (x1 > fpr_limit) {
            y1 = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0);
            x1 = fpr_limit;
        }
        area += 0.5 * (x1 - x0) * (y0 + y1);
    }
    return std::clamp(area / fpr_limit, 0.0, 1.0);
}

nlohmann::json EvalReport::to_json() const {
    auto one = [](const MetricSet& m) {
        return nlohmann::json{{"image_auroc", m.image_auroc}, {"image_ap", m.image_ap}, {"pixel_auroc", m.pixel_auroc},
                              {"pro", m.pro}, {"images", m.images}, {"anomalous", m.anomalous}};
    };
    nlohmann::json j;
    j["mean"] = one(mean);
    j["per_class"] = nlohmann::json::object();
    for (const auto& [c, m] : per_class) j["per_class"][c] = one(m);
    return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
    auto one = [](const nlohmann::json& o) {
        MetricSet m;
        m.image_auroc = o.at("image_auroc").get<double>();
        m.image_ap = o.at("image_ap").get<double>();
        m.pixel_auroc = o.at("pixel_auroc").get<double>();
        m.pro = o.at("pro").get<double>();
        m.images = o.at("images").get<std::size_t>();
        m.anomalous = o.at("anomalous").get<std::size_t>();
        return m;
    };
    EvalReport r;
    r.mean = one(j.at("mean"));
    for (const auto& [c, o] : j.at("per_class").items()) r.per_class.emplace(c, one(o));
    return r;
}

EvalReport evaluate_predictions(const std::vector<ScoredImage>& images, std::size_t pro_thresholds) {
    if (images.empty()) throw InputError("no predictions to evaluate");
    std::map<std::string, std::vector<const ScoredImage*>> groups;
    for (const auto& im : images) groups[im.cls].push_back(&im);

    EvalReport report;
    for (const auto& [cls, group] : groups) {
        std::vector<double> scores;
        std::vector<int> labels;
        std::vector<Tensor> maps, masks;
        MetricSet m;
        for (const ScoredImage* im : group) {
            scores.push_back(im->score);
            labels.push_back(im->label);
            maps.push_back(im->map);
            masks.push_back(im->mask);
            m.anomalous += im->label ? 1 : 0;
        }
        m.images = group.size();
        m.image_auroc = auroc(scores, labels);
        m.image_ap = average_precision(scores, labels);
        m.pixel_auroc = pixel_auroc(maps, masks);
        m.pro = pro_score(maps, masks, 0.3, pro_thresholds);
        report.per_class.emplace(cls, m);
    }
    const double n = static_cast<double>(report.per_class.size());
    for (const auto& [cls, m] : report.per_class) {
        report.mean.image_auroc += m.image_auroc / n;
        report.mean.image_ap += m.image_ap / n;
        report.mean.pixel_auroc += m.pixel_auroc / n;
        report.mean.pro += m.pro / n;
        report.mean.images += m.images;
        report.mean.anomalous += m.anomalous;
    }
    return report;
}

void write_report_csv(std::ostream& os, const EvalReport& report) {
    os << "class,image_auroc,image_ap,pixel_auroc,pro,images,anomalous\n" << std::setprecision(10);
    auto row = [&](const std::string& name, const MetricSet& m) {
        os << name << ',' << m.image_auroc << ',' << m.image_ap << ',' << m.pixel_auroc << ',' << m.pro << ','
           << m.images << ',' << m.anomalous << '\n';
    };
    for (const auto& [c, m] : report.per_class) row(c, m);
    row("mean", report.mean);
}

}  // namespace pmoe
