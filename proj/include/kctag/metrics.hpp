#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "kctag/errors.hpp"

namespace kctag {

// Binary confusion counts with Match as the positive class.
struct ConfusionCounts {
    std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;

    std::int64_t total() const { return tp + fp + tn + fn; }

    void add(bool gold_positive, bool predicted_positive) {
        if (gold_positive)
            (predicted_positive ? tp : fn) += 1;
        else
            (predicted_positive ? fp : tn) += 1;
    }

    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        fp += o.fp;
        tn += o.tn;
        fn += o.fn;
        return *this;
    }
};

// Accuracy/precision/recall/F1 with explicit zero-division conventions:
// precision = 0 when tp+fp = 0, recall = 0 when tp+fn = 0, f1 = 0 when
// precision+recall = 0; each degenerate case raises a flag.
struct MetricSummary {
    double accuracy = 0, precision = 0, recall = 0, f1 = 0;
    bool precision_zero_div = false, recall_zero_div = false, f1_zero_div = false;
};

inline MetricSummary summarize(const ConfusionCounts& c) {
    MetricSummary m;
    const std::int64_t n = c.total();
    m.accuracy = n == 0 ? 0.0 : static_cast<double>(c.tp + c.tn) / static_cast<double>(n);
    if (c.tp + c.fp == 0) {
        m.precision_zero_div = true;
    } else {
        m.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    }
    if (c.tp + c.fn == 0) {
        m.recall_zero_div = true;
    } else {
        m.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    }
    if (m.precision + m.recall == 0.0) {
        m.f1_zero_div = true;
    } else {
        m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
    }
    return m;
}

// Sample Pearson correlation. Returns nullopt for fewer than 3 points; a
// zero-variance input yields 0 with the flag set rather than NaN.
inline std::optional<double> pearson_correlation(std::span<const double> x,
                                                 std::span<const double> y,
                                                 bool* zero_variance = nullptr) {
    if (x.size() != y.size())
        throw ContractViolation("pearson_correlation: size mismatch");
    if (zero_variance) *zero_variance = false;
    const std::size_t n = x.size();
    if (n < 3) return std::nullopt;

    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);

    double sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx == 0.0 || syy == 0.0) {
        if (zero_variance) *zero_variance = true;
        return 0.0;
    }
    return sxy / std::sqrt(sxx * syy);
}

}  // namespace kctag
