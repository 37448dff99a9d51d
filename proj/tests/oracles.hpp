#pragma once

// Independent brute-force oracles used only by the test suites. These are
// written directly from the mathematical definitions and deliberately share
// no index machinery with the library kernels.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "msv/ops.hpp"
#include "msv/tensor.hpp"

namespace oracle {

// Direct cross-correlation, double accumulation, one loop per symbol.
template <class T>
msv::Tensor<double> conv2d(const msv::Tensor<T>& x, const msv::Tensor<T>& wt,
                           const msv::Tensor<std::type_identity_t<T>>* bias,
                           const msv::ConvParams& p) {
  const long long N = static_cast<long long>(x.n());
  const long long Cin = static_cast<long long>(x.c());
  const long long H = static_cast<long long>(x.h());
  const long long W = static_cast<long long>(x.w());
  const long long Cout = static_cast<long long>(p.out_channels);
  const long long KH = static_cast<long long>(p.kernel_h);
  const long long KW = static_cast<long long>(p.kernel_w);
  const long long S = static_cast<long long>(p.stride);
  const long long P = static_cast<long long>(p.padding);
  const long long D = static_cast<long long>(p.dilation);
  const long long G = static_cast<long long>(p.groups);
  const long long CinG = Cin / G;
  const long long CoutG = Cout / G;
  const long long Hout = (H + 2 * P - D * (KH - 1) - 1) / S + 1;
  const long long Wout = (W + 2 * P - D * (KW - 1) - 1) / S + 1;

  msv::Tensor<double> out({static_cast<std::size_t>(N), static_cast<std::size_t>(Cout),
                           static_cast<std::size_t>(Hout), static_cast<std::size_t>(Wout)});
  for (long long n = 0; n < N; ++n)
    for (long long oc = 0; oc < Cout; ++oc)
      for (long long oh = 0; oh < Hout; ++oh)
        for (long long ow = 0; ow < Wout; ++ow) {
          double acc = bias ? static_cast<double>((*bias)[static_cast<std::size_t>(oc)]) : 0.0;
          const long long g = oc / CoutG;
          for (long long ic = 0; ic < CinG; ++ic)
            for (long long kh = 0; kh < KH; ++kh)
              for (long long kw = 0; kw < KW; ++kw) {
                const long long ih = oh * S - P + kh * D;
                const long long iw = ow * S - P + kw * D;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += static_cast<double>(
                           x.at4(static_cast<std::size_t>(n), static_cast<std::size_t>(g * CinG + ic),
                                 static_cast<std::size_t>(ih), static_cast<std::size_t>(iw))) *
                       static_cast<double>(wt.at4(static_cast<std::size_t>(oc),
                                                  static_cast<std::size_t>(ic),
                                                  static_cast<std::size_t>(kh),
                                                  static_cast<std::size_t>(kw)));
              }
          out.at4(static_cast<std::size_t>(n), static_cast<std::size_t>(oc),
                  static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)) = acc;
        }
  return out;
}

// Windowed mean with zero padding and full-kernel-area division.
template <class T>
msv::Tensor<double> avg_pool2d(const msv::Tensor<T>& x, long long k, long long s, long long p) {
  const long long N = static_cast<long long>(x.n());
  const long long C = static_cast<long long>(x.c());
  const long long H = static_cast<long long>(x.h());
  const long long W = static_cast<long long>(x.w());
  const long long Hout = (H + 2 * p - k) / s + 1;
  const long long Wout = (W + 2 * p - k) / s + 1;
  msv::Tensor<double> out({static_cast<std::size_t>(N), static_cast<std::size_t>(C),
                           static_cast<std::size_t>(Hout), static_cast<std::size_t>(Wout)});
  for (long long n = 0; n < N; ++n)
    for (long long c = 0; c < C; ++c)
      for (long long oh = 0; oh < Hout; ++oh)
        for (long long ow = 0; ow < Wout; ++ow) {
          double sum = 0;
          for (long long kh = 0; kh < k; ++kh)
            for (long long kw = 0; kw < k; ++kw) {
              const long long ih = oh * s - p + kh;
              const long long iw = ow * s - p + kw;
              if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
              sum += static_cast<double>(x.at4(static_cast<std::size_t>(n),
                                               static_cast<std::size_t>(c),
                                               static_cast<std::size_t>(ih),
                                               static_cast<std::size_t>(iw)));
            }
          out.at4(static_cast<std::size_t>(n), static_cast<std::size_t>(c),
                  static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)) =
              sum / static_cast<double>(k * k);
        }
  return out;
}

template <class T>
double max_abs_diff(const msv::Tensor<T>& a, const msv::Tensor<double>& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(static_cast<double>(a[i]) - b[i]));
  return worst;
}

template <class T>
bool bit_equal(const msv::Tensor<T>& a, const msv::Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

template <class T>
msv::Tensor<T> random_tensor(msv::Rng& rng, msv::Shape shape, double lo = -1.0, double hi = 1.0) {
  return msv::rng_fill<T>(rng, std::move(shape), msv::FillUniform{lo, hi});
}

}  // namespace oracle
