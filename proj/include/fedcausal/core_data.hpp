#pragma once

#include "fedcausal/error.hpp"
#include "fedcausal/types.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace fedcausal {

/// One individual: covariates, treatment indicator, observed outcome and the
/// 1-based label of the site holding the record.
struct Record {
  Vector x;
  int w = 0;
  double y = 0.0;
  int h = 1;
};

/// Rows held by one site. Record i is (x.row(i), w(i), y(i)).
struct SiteDataset {
  int site_id = 1;
  Covariates x;
  IntVector w;
  Vector y;

  Eigen::Index size() const noexcept { return y.size(); }
  Eigen::Index dim() const noexcept { return x.cols(); }
  Record record(Eigen::Index i) const;
  /// Number of rows with w == 1.
  Eigen::Index treated_count() const;
};

struct FederatedDataset {
  std::vector<SiteDataset> sites;
  Eigen::Index d = 0;

  std::size_t num_sites() const noexcept { return sites.size(); }
  Eigen::Index size() const;

  /// Groups records by their site label into K sites (labels 1..K). Does not
  /// validate; call validate_federation on the result.
  static FederatedDataset from_records(std::span<const Record> records, std::size_t num_sites,
                                       Eigen::Index dim);
  std::vector<Record> records() const;
};

struct ValidationResult {
  bool ok = true;
  std::optional<ErrorCode> code;
  std::string message;

  explicit operator bool() const noexcept { return ok; }
};

/// Checks every record/site/federation invariant; never throws.
ValidationResult validate_federation(const FederatedDataset& fd);

/// Throws the first violated invariant as an Error.
void require_valid(const FederatedDataset& fd);

/// (n_1/n, ..., n_K/n).
Vector site_proportions(const FederatedDataset& fd);

/// CSV layout: header `site,w,y,x1,...,xd`, one record per line, sites 1-based.
FederatedDataset read_csv(std::istream& in);
FederatedDataset read_csv_file(const std::string& path);
void write_csv(std::ostream& out, const FederatedDataset& fd);
void write_csv_file(const std::string& path, const FederatedDataset& fd);

/// Shortest round-trip decimal representation; used by every CSV writer so
/// output bytes are a pure function of the values.
std::string format_double(double v);

// ---------------------------------------------------------------------------
// Randomness

enum class StreamPurpose : std::uint8_t {
  Data = 1,
  FedAvg = 2,
  Bootstrap = 3,
  TrueAte = 4,
  Fixture = 5,
};

/// Packs (purpose, attempt, replication, site) into one stream id. Distinct
/// tuples give distinct ids for replication < 2^32 and site < 2^16.
std::uint64_t stream_id(StreamPurpose purpose, std::uint64_t replication, std::uint64_t site,
                        std::uint64_t attempt = 0);

/// Independently owned random stream. The same (seed, stream_id) always yields
/// the same sequence; streams are never shared between workers.
class RngHandle {
 public:
  using result_type = std::mt19937_64::result_type;

  RngHandle(std::uint64_t seed, std::uint64_t stream);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }

  static constexpr result_type min() { return std::mt19937_64::min(); }
  static constexpr result_type max() { return std::mt19937_64::max(); }
  result_type operator()() { return engine_(); }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double normal() { return normal_(engine_); }
  bool bernoulli(double p) { return uniform() < p; }
  /// Uniform integer in [0, n).
  Eigen::Index index(Eigen::Index n) {
    return std::uniform_int_distribution<Eigen::Index>(0, n - 1)(engine_);
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace fedcausal
