#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace cmv {

// Deterministic pairwise (cascade) summation. Reduction order depends only on
// the element order, never on thread count.
double pairwise_sum(std::span<const double> xs);

double mean(std::span<const double> xs);
// Standard error of the mean (sample stddev / sqrt(n)).
double stderr_mean(std::span<const double> xs);
// Exact median; even n averages the two middle order statistics.
double median(std::span<double> xs);
double median_copy(std::span<const double> xs);

// Delete-one jackknife standard error for a statistic given per-sample values
// and the statistic as a function of a sample subset mean. For plain means this
// coincides with stderr_mean; we use it for ratio/log functionals.
double jackknife_stderr(std::span<const double> values,
                        const std::function<double(std::span<const double>)>& stat);

struct FitResult {
    double exponent = 0.0;  // slope in log-log space
    double intercept = 0.0; // log-space intercept
    double r2 = 0.0;
};

// Least squares on (log x, log y). All inputs must be positive.
FitResult fit_loglog(std::span<const double> xs, std::span<const double> ys);

// Two-sample Kolmogorov-Smirnov statistic.
double ks_statistic(std::span<const double> a, std::span<const double> b);
// Critical value at significance alpha for sample sizes n, m.
double ks_threshold(std::size_t n, std::size_t m, double alpha);

// SHA-1 of a byte string, lowercase hex.
std::string sha1_hex(std::string_view data);
// Content hash in the git blob style: sha1("blob <len>\0<content>").
std::string content_hash(std::string_view content);

// Locale-free shortest round-trip formatting of a double.
std::string format_double(double v);

// Write a file atomically (temp file + rename).
void atomic_write_file(const std::string& path, const std::string& content);

// Runs fn(i) for i in [0, n). threads <= 1 runs inline; 0 means hardware
// concurrency. Work items must not share mutable state except via their index.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

} // namespace cmv
