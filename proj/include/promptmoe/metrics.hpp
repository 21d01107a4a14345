#pragma once

#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "promptmoe/tensor.hpp"

namespace pmoe {

// Mann-Whitney AUROC; tied positive/negative pairs count ½.
double auroc(std::span<const double> scores, std::span<const int> labels);

// Σ (R_i − R_{i−1})·P_i over distinct descending score thresholds.
double average_precision(std::span<const double> scores, std::span<const int> labels);

// AUROC over the pooled pixels of all maps (mask > 0.5 is positive).
double pixel_auroc(const std::vector<Tensor>& maps, const std::vector<Tensor>& masks);

// 8-connected components of mask > 0.5, labelled 1..n in raster order of
// first pixel; 0 is background.
std::vector<int> label_components(const Tensor& mask, int* count = nullptr);

// Area under the per-region-overlap vs FPR curve up to `fpr_limit`,
// normalised by the limit. `num_thresholds` = 0 sweeps every distinct map
// value; otherwise that many evenly spaced quantiles of the pooled values.
double pro_score(const std::vector<Tensor>& maps, const std::vector<Tensor>& masks, double fpr_limit = 0.3,
                 std::size_t num_thresholds = 200);

struct MetricSet {
    double image_auroc = 0, image_ap = 0, pixel_auroc = 0, pro = 0;
    std::size_t images = 0, anomalous = 0;
};

struct EvalReport {
    std::map<std::string, MetricSet> per_class;
    MetricSet mean;  // unweighted mean over classes; counts are totals

    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json& j);
};

struct ScoredImage {
    std::string cls;
    int label = 0;
    double score = 0;
    Tensor map;   // smoothed anomaly map
    Tensor mask;  // binary, same shape
};

EvalReport evaluate_predictions(const std::vector<ScoredImage>& images, std::size_t pro_thresholds = 200);

// Columns: class,image_auroc,image_ap,pixel_auroc,pro,images,anomalous
// with a final row for the class mean.
void write_report_csv(std::ostream& os, const EvalReport& report);

}  // namespace pmoe
