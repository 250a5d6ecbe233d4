#pragma once

#include "fedcausal/core_data.hpp"

#include <doctest.h>

#include <vector>

namespace testing {

using namespace fedcausal;

inline SiteDataset make_site(int id, const Covariates& x, const IntVector& w, const Vector& y) {
  SiteDataset s;
  s.site_id = id;
  s.x = x;
  s.w = w;
  s.y = y;
  return s;
}

/// K sites of random sizes in [n_min, n_max], Gaussian x, both arms present.
inline FederatedDataset random_federation(RngHandle& rng, std::size_t k, Eigen::Index d, Eigen::Index n_min,
                                          Eigen::Index n_max) {
  FederatedDataset fd;
  fd.d = d;
  for (std::size_t s = 0; s < k; ++s) {
    const Eigen::Index n = n_min + rng.index(n_max - n_min + 1);
    SiteDataset site;
    site.site_id = static_cast<int>(s + 1);
    site.x.resize(n, d);
    site.w.resize(n);
    site.y.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < d; ++j) site.x(i, j) = rng.normal() + 0.3 * static_cast<double>(s);
      site.w(i) = i < 2 ? static_cast<int>(i) : (rng.bernoulli(0.5) ? 1 : 0);
      site.y(i) = site.x.row(i).sum() + 2.0 * site.w(i) + rng.normal();
    }
    fd.sites.push_back(std::move(site));
  }
  return fd;
}

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::InvalidArgument;
}

}  // namespace testing
