#include "pivsem/gauss.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace pivsem {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;
constexpr double kSqrt2 = 1.4142135623730950488016887242097;

// Gauss-Legendre abscissae/weights on (0,1) halves, 6/12/20 point rules.
const double kGW1[3] = {0.1713244923791704, 0.3607615730481386, 0.4679139345726910};
const double kGX1[3] = {0.9324695142031521, 0.6612093864662645, 0.2386191860831969};
const double kGW2[6] = {0.04717533638651183, 0.1069393259953184, 0.1600783285433462,
                        0.2031674267230659,  0.2334925365383548, 0.2491470458134028};
const double kGX2[6] = {0.9815606342467192, 0.9041172563704749, 0.7699026741943047,
                        0.5873179542866175, 0.3678314989981802, 0.1252334085114689};
const double kGW3[10] = {0.01761400713915212, 0.04060142980038694, 0.06267204833410907,
                         0.08327674157670475, 0.1019301198172404,  0.1181945319615184,
                         0.1316886384491766,  0.1420961093183820,  0.1491729864726037,
                         0.1527533871307258};
const double kGX3[10] = {0.9931285991850949, 0.9639719272779138, 0.9122344282513259,
                         0.8391169718222188, 0.7463319064601508, 0.6360536807265150,
                         0.5108670019508271, 0.3737060887154195, 0.2277858511416451,
                         0.07652652113349734};

// Genz's BVND: P(X > dh, Y > dk) for standard bivariate normal, finite dh,dk.
double bvn_upper(double dh, double dk, double r) {
  const double* w;
  const double* x;
  int lg;
  if (std::abs(r) < 0.3) {
    w = kGW1; x = kGX1; lg = 3;
  } else if (std::abs(r) < 0.75) {
    w = kGW2; x = kGX2; lg = 6;
  } else {
    w = kGW3; x = kGX3; lg = 10;
  }
  double h = dh, k = dk;
  double hk = h * k;
  double bvn = 0.0;
  if (std::abs(r) < 0.925) {
    if (std::abs(r) > 0.0) {
      const double hs = (h * h + k * k) / 2.0;
      const double asr = std::asin(r);
      for (int i = 0; i < lg; ++i)
        for (int sgn = -1; sgn <= 1; sgn += 2) {
          const double sn = std::sin(asr * (sgn * x[i] + 1.0) / 2.0);
          bvn += w[i] * std::exp((sn * hk - hs) / (1.0 - sn * sn));
        }
      bvn = bvn * asr / (2.0 * kTwoPi);
    }
    bvn += norm_cdf(-h) * norm_cdf(-k);
  } else {
    if (r < 0.0) {
      k = -k;
      hk = -hk;
    }
    if (std::abs(r) < 1.0) {
      const double as = (1.0 - r) * (1.0 + r);
      double a = std::sqrt(as);
      const double bs = (h - k) * (h - k);
      const double c = (4.0 - hk) / 8.0;
      const double d = (12.0 - hk) / 16.0;
      double asr = -(bs / as + hk) / 2.0;
      if (asr > -100.0)
        bvn = a * std::exp(asr) *
              (1.0 - c * (bs - as) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as * as / 5.0);
      if (-hk < 100.0) {
        const double b = std::sqrt(bs);
        const double sp = std::sqrt(kTwoPi) * norm_cdf(-b / a);
        bvn -= std::exp(-hk / 2.0) * sp * b * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
      }
      a /= 2.0;
      for (int i = 0; i < lg; ++i)
        for (int sgn = -1; sgn <= 1; sgn += 2) {
          const double xs = std::pow(a * (sgn * x[i] + 1.0), 2);
          const double rs = std::sqrt(1.0 - xs);
          asr = -(bs / xs + hk) / 2.0;
          if (asr > -100.0) {
            const double poly = 1.0 + c * xs * (1.0 + d * xs);
            const double ep = std::exp(-hk * (1.0 - rs) / (2.0 * (1.0 + rs))) / rs;
            bvn += a * w[i] * std::exp(asr) * (ep - poly);
          }
        }
      bvn = -bvn / kTwoPi;
    }
    if (r > 0.0) {
      bvn += norm_cdf(-std::max(h, k));
    } else {
      bvn = -bvn;
      if (k > h) bvn += norm_cdf(k) - norm_cdf(h);
    }
  }
  return std::clamp(bvn, 0.0, 1.0);
}

}  // namespace

double norm_pdf(double x) {
  if (std::isinf(x)) return 0.0;
  return std::exp(-0.5 * x * x) / std::sqrt(kTwoPi);
}

double norm_cdf(double x) {
  if (x == kPosInf) return 1.0;
  if (x == kNegInf) return 0.0;
  return 0.5 * std::erfc(-x / kSqrt2);
}

double norm_quantile(double p) {
  if (std::isnan(p) || p < 0.0 || p > 1.0)
    throw std::domain_error("norm_quantile: p outside [0,1]");
  if (p == 0.0) return kNegInf;
  if (p == 1.0) return kPosInf;

  const double q = p - 0.5;
  if (std::abs(q) <= 0.425) {
    const double r = 0.180625 - q * q;
    return q *
           (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r +
                 6.7265770927008700853e4) * r + 4.5921953931549871457e4) * r +
               1.3731693765509461125e4) * r + 1.9715909503065514427e3) * r +
             1.3314166789178437745e2) * r + 3.3871328727963666080e0) /
           (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r +
                 3.9307895800092710610e4) * r + 2.1213794301586595867e4) * r +
               5.3941960214247511077e3) * r + 6.8718700749205790830e2) * r +
             4.2313330701600911252e1) * r + 1.0);
  }
  double r = q < 0.0 ? p : 1.0 - p;
  r = std::sqrt(-std::log(r));
  double val;
  if (r <= 5.0) {
    r -= 1.6;
    val = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r +
                2.41780725177450611770e-1) * r + 1.27045825245236838258e0) * r +
              3.64784832476320460504e0) * r + 5.76949722146069140550e0) * r +
            4.63033784615654529590e0) * r + 1.42343711074968357734e0) /
          (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r +
                1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r +
              6.89767334985100004550e-1) * r + 1.67638483018380384940e0) * r +
            2.05319162663775882187e0) * r + 1.0);
  } else {
    r -= 5.0;
    val = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r +
                1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r +
              2.96560571828504891230e-1) * r + 1.78482653991729133580e0) * r +
            5.46378491116411436990e0) * r + 6.65790464350110377720e0) /
          (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r +
                1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r +
              1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r +
            5.99832206555887937690e-1) * r + 1.0);
  }
  return q < 0.0 ? -val : val;
}

double bvn_cdf(double a, double b, double rho) {
  if (std::abs(rho) >= 1.0) throw std::domain_error("bvn_cdf: |rho| must be < 1");
  if (a == kNegInf || b == kNegInf) return 0.0;
  if (a == kPosInf && b == kPosInf) return 1.0;
  if (a == kPosInf) return norm_cdf(b);
  if (b == kPosInf) return norm_cdf(a);
  return bvn_upper(-a, -b, rho);
}

double bvn_cdf(const BvnPoint& pt) { return bvn_cdf(pt.a, pt.b, pt.rho); }

double bvn_pdf(double a, double b, double rho) {
  if (std::isinf(a) || std::isinf(b)) return 0.0;
  const double om = 1.0 - rho * rho;
  return std::exp(-(a * a - 2.0 * rho * a * b + b * b) / (2.0 * om)) /
         (kTwoPi * std::sqrt(om));
}

double bvn_cdf_drho(double a, double b, double rho) {
  if (std::abs(rho) >= 1.0) throw std::domain_error("bvn_cdf_drho: |rho| must be < 1");
  return bvn_pdf(a, b, rho);
}

double bvn_cdf_drho(const BvnPoint& pt) { return bvn_cdf_drho(pt.a, pt.b, pt.rho); }

double bvn_cdf_da(double a, double b, double rho) {
  if (std::isinf(a)) return 0.0;
  if (b == kPosInf) return norm_pdf(a);
  if (b == kNegInf) return 0.0;
  const double s = std::sqrt(1.0 - rho * rho);
  return norm_pdf(a) * norm_cdf((b - rho * a) / s);
}

double bvn_rect(double alo, double ahi, double blo, double bhi, double rho) {
  return bvn_cdf(ahi, bhi, rho) - bvn_cdf(alo, bhi, rho) - bvn_cdf(ahi, blo, rho) +
         bvn_cdf(alo, blo, rho);
}

}  // namespace pivsem
