#include "parattn/metrics.hpp"

#include "parattn/errors.hpp"

namespace parattn {

namespace {

double kl_term(double a, double m) { return a > 0.0 ? a * std::log(a / m) : 0.0; }

}  // namespace

double js_divergence(const RowVector& p, const RowVector& q) {
  if (p.size() != q.size()) throw DimensionError("js_divergence: length mismatch");
  double js = 0.0;
  for (Index i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p(i) + q(i));
    if (m <= 0.0) continue;
    js += 0.5 * kl_term(p(i), m) + 0.5 * kl_term(q(i), m);
  }
  return std::max(js, 0.0);
}

double mean_row_js_divergence(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError("mean_row_js_divergence: " + shape_string(a) + " vs " + shape_string(b));
  if (a.rows() == 0) return 0.0;
  double total = 0.0;
  for (Index r = 0; r < a.rows(); ++r) total += js_divergence(a.row(r), b.row(r));
  return total / static_cast<double>(a.rows());
}

}  // namespace parattn
