#pragma once

// Univariate and bivariate normal kernels for the stage-1 likelihoods.
// Thresholds at the boundary are passed as genuine +-infinity, never as
// large finite surrogates.

#include <limits>

namespace pivsem {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();
inline constexpr double kPosInf = std::numeric_limits<double>::infinity();

struct BvnPoint {
  double a = 0.0;
  double b = 0.0;
  double rho = 0.0;
};

double norm_pdf(double x);
double norm_cdf(double x);

// Inverse of norm_cdf (Wichura's AS241 rational approximations).
// p = 0 and p = 1 map to the infinity sentinels; outside [0,1] throws.
double norm_quantile(double p);

// P(X <= a, Y <= b) for standard bivariate normal with correlation rho.
// |rho| >= 1 throws. Absolute accuracy ~1e-15 (Genz's quadrature scheme).
double bvn_cdf(double a, double b, double rho);
double bvn_cdf(const BvnPoint& pt);

// Standard bivariate normal density; 0 when a or b is infinite.
double bvn_pdf(double a, double b, double rho);

// d/d(rho) bvn_cdf(a,b,rho) = bvn_pdf(a,b,rho) (Plackett's identity).
double bvn_cdf_drho(double a, double b, double rho);
double bvn_cdf_drho(const BvnPoint& pt);

// d/da bvn_cdf(a,b,rho) = pdf(a) * cdf((b - rho a)/sqrt(1 - rho^2)).
double bvn_cdf_da(double a, double b, double rho);

// P(alo < X <= ahi, blo < Y <= bhi).
double bvn_rect(double alo, double ahi, double blo, double bhi, double rho);

}  // namespace pivsem
