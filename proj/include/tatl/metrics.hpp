#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "tatl/mask.hpp"

namespace tatl {

// Dice coefficient 2|A.B| / (|A|+|B|).  Two empty masks count as a perfect
// match (1.0); dimensions must agree.
double dice(const binary_mask& pred, const binary_mask& target);

// Jaccard index |A.B| / |A+B|, with the same empty-vs-empty convention.
double jaccard(const binary_mask& pred, const binary_mask& target);

// Per-sample scores for one cross-validation fold; `jaccard` and `dice` are
// aligned by sample index.
struct fold_scores {
    std::vector<double> jaccard;
    std::vector<double> dice;
};

struct metric_row {
    std::string label;
    double jaccard_mean = 0.0;
    double jaccard_std = 0.0;
    double dice_mean = 0.0;
    double dice_std = 0.0;
};

// One row per attribute, in enum order, followed by an unweighted "Average"
// row over the attribute rows.
struct metric_summary {
    std::vector<metric_row> rows;
};

// For each attribute: collapse each fold to its per-sample mean, then report
// the mean and population standard deviation across fold means.  A single
// fold therefore yields a zero standard deviation.
metric_summary summarize(const std::map<attribute, std::vector<fold_scores>>& scores);

// CSV rendering with a fixed header and six-decimal fixed-point values, so
// identical inputs produce byte-identical files.
std::string to_csv(const metric_summary& summary);
void write_csv(const metric_summary& summary, const std::filesystem::path& path);

}  // namespace tatl
