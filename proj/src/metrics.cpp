#include "tatl/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace tatl {

namespace {

struct overlap_counts {
    std::size_t intersection = 0;
    std::size_t pred_count = 0;
    std::size_t target_count = 0;
};

overlap_counts count_overlap(const binary_mask& pred, const binary_mask& target,
                             const char* caller) {
    if (pred.height() != target.height() || pred.width() != target.width()) {
        throw dimension_error(std::string(caller) + ": prediction is " +
                              std::to_string(pred.height()) + "x" +
                              std::to_string(pred.width()) + ", target is " +
                              std::to_string(target.height()) + "x" +
                              std::to_string(target.width()));
    }
    overlap_counts c;
    const std::uint8_t* p = pred.bits().data();
    const std::uint8_t* t = target.bits().data();
    for (std::size_t i = 0; i < pred.size(); ++i) {
        c.pred_count += p[i];
        c.target_count += t[i];
        c.intersection += static_cast<std::size_t>(p[i] & t[i]);
    }
    return c;
}

}  // namespace

double dice(const binary_mask& pred, const binary_mask& target) {
    const overlap_counts c = count_overlap(pred, target, "dice");
    const std::size_t uni = c.pred_count + c.target_count - c.intersection;
    if (uni == 0) return 1.0;  // both masks empty: treat as perfect agreement
    // Evaluated through the overlap ratio so that dice == 2j/(1+j) holds
    // bit-exactly for the jaccard value of the same pair; the direct form
    // 2|A.B|/(|A|+|B|) is the same rational number but rounds differently.
    const double j = static_cast<double>(c.intersection) / static_cast<double>(uni);
    return 2.0 * j / (1.0 + j);
}

double jaccard(const binary_mask& pred, const binary_mask& target) {
    const overlap_counts c = count_overlap(pred, target, "jaccard");
    const std::size_t uni = c.pred_count + c.target_count - c.intersection;
    if (uni == 0) return 1.0;
    return static_cast<double>(c.intersection) / static_cast<double>(uni);
}

namespace {

double mean_of(const std::vector<double>& xs) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

// Population standard deviation (divide by n, not n-1): one fold means zero
// spread, not an undefined one.
double population_std(const std::vector<double>& xs) {
    const double mu = mean_of(xs);
    double s = 0.0;
    for (double x : xs) s += (x - mu) * (x - mu);
    return std::sqrt(s / static_cast<double>(xs.size()));
}

}  // namespace

metric_summary summarize(const std::map<attribute, std::vector<fold_scores>>& scores) {
    if (scores.empty()) throw data_error("summarize: no attributes to summarize");

    metric_summary summary;
    for (const auto& [attr, folds] : scores) {
        if (folds.empty()) {
            throw data_error("summarize: no folds for attribute " + attribute_name(attr));
        }
        std::vector<double> jaccard_fold_means, dice_fold_means;
        for (const fold_scores& fold : folds) {
            if (fold.jaccard.empty()) {
                throw data_error("summarize: empty fold for attribute " + attribute_name(attr));
            }
            if (fold.jaccard.size() != fold.dice.size()) {
                throw dimension_error("summarize: fold for attribute " + attribute_name(attr) +
                                      " has mismatched score lists");
            }
            jaccard_fold_means.push_back(mean_of(fold.jaccard));
            dice_fold_means.push_back(mean_of(fold.dice));
        }
        metric_row row;
        row.label = attribute_name(attr);
        row.jaccard_mean = mean_of(jaccard_fold_means);
        row.jaccard_std = population_std(jaccard_fold_means);
        row.dice_mean = mean_of(dice_fold_means);
        row.dice_std = population_std(dice_fold_means);
        summary.rows.push_back(std::move(row));
    }

    metric_row avg;
    avg.label = "Average";
    for (const metric_row& row : summary.rows) {
        avg.jaccard_mean += row.jaccard_mean;
        avg.jaccard_std += row.jaccard_std;
        avg.dice_mean += row.dice_mean;
        avg.dice_std += row.dice_std;
    }
    const double n = static_cast<double>(summary.rows.size());
    avg.jaccard_mean /= n;
    avg.jaccard_std /= n;
    avg.dice_mean /= n;
    avg.dice_std /= n;
    summary.rows.push_back(std::move(avg));
    return summary;
}

std::string to_csv(const metric_summary& summary) {
    std::string out = "attribute,jaccard_mean,jaccard_std,dice_mean,dice_std\n";
    char line[256];
    for (const metric_row& row : summary.rows) {
        std::snprintf(line, sizeof(line), "%s,%.6f,%.6f,%.6f,%.6f\n", row.label.c_str(),
                      row.jaccard_mean, row.jaccard_std, row.dice_mean, row.dice_std);
        out += line;
    }
    return out;
}

void write_csv(const metric_summary& summary, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("write_csv: cannot open " + path.string());
    out << to_csv(summary);
    if (!out) throw io_error("write_csv: write failed for " + path.string());
}

}  // namespace tatl
