#include "fedcausal/core_data.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace fedcausal {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::EmptySite: return "EmptySite";
    case ErrorCode::InvalidTreatment: return "InvalidTreatment";
    case ErrorCode::InvalidSiteLabel: return "InvalidSiteLabel";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::NonPositiveDefiniteCovariance: return "NonPositiveDefiniteCovariance";
    case ErrorCode::SingularHessian: return "SingularHessian";
    case ErrorCode::InsufficientData: return "InsufficientData";
    case ErrorCode::SingularCovariance: return "SingularCovariance";
    case ErrorCode::AllDensitiesZero: return "AllDensitiesZero";
    case ErrorCode::DivergenceDetected: return "DivergenceDetected";
    case ErrorCode::EmptyGlobalArm: return "EmptyGlobalArm";
    case ErrorCode::ZeroVariance: return "ZeroVariance";
    case ErrorCode::DivisionByZeroPropensity: return "DivisionByZeroPropensity";
    case ErrorCode::MetaUndefined: return "MetaUndefined";
    case ErrorCode::TooManyFailedResamples: return "TooManyFailedResamples";
    case ErrorCode::DegenerateFederation: return "DegenerateFederation";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

Record SiteDataset::record(Eigen::Index i) const {
  return Record{x.row(i).transpose(), w(i), y(i), site_id};
}

Eigen::Index SiteDataset::treated_count() const { return (w.array() == 1).count(); }

Eigen::Index FederatedDataset::size() const {
  Eigen::Index n = 0;
  for (const auto& s : sites) n += s.size();
  return n;
}

FederatedDataset FederatedDataset::from_records(std::span<const Record> records, std::size_t num_sites,
                                                Eigen::Index dim) {
  FederatedDataset fd;
  fd.d = dim;
  std::vector<Eigen::Index> counts(num_sites, 0);
  for (const auto& r : records) {
    if (r.h < 1 || static_cast<std::size_t>(r.h) > num_sites)
      fail(ErrorCode::InvalidSiteLabel, "site label " + std::to_string(r.h) + " outside [1.." +
                                            std::to_string(num_sites) + "]");
    if (r.x.size() != dim)
      fail(ErrorCode::DimensionMismatch, "record has " + std::to_string(r.x.size()) +
                                             " covariates, expected " + std::to_string(dim));
    ++counts[r.h - 1];
  }
  fd.sites.resize(num_sites);
  for (std::size_t k = 0; k < num_sites; ++k) {
    auto& s = fd.sites[k];
    s.site_id = static_cast<int>(k + 1);
    s.x.resize(counts[k], dim);
    s.w.resize(counts[k]);
    s.y.resize(counts[k]);
  }
  std::vector<Eigen::Index> next(num_sites, 0);
  for (const auto& r : records) {
    auto& s = fd.sites[r.h - 1];
    const Eigen::Index i = next[r.h - 1]++;
    s.x.row(i) = r.x.transpose();
    s.w(i) = r.w;
    s.y(i) = r.y;
  }
  return fd;
}

std::vector<Record> FederatedDataset::records() const {
  std::vector<Record> out;
  out.reserve(static_cast<std::size_t>(size()));
  for (const auto& s : sites)
    for (Eigen::Index i = 0; i < s.size(); ++i) out.push_back(s.record(i));
  return out;
}

namespace {

ValidationResult invalid(ErrorCode code, std::string msg) {
  return ValidationResult{false, code, std::move(msg)};
}

}  // namespace

ValidationResult validate_federation(const FederatedDataset& fd) {
  if (fd.sites.empty()) return invalid(ErrorCode::EmptySite, "federation has no sites");
  if (fd.d < 1) return invalid(ErrorCode::DimensionMismatch, "covariate dimension must be >= 1");
  for (std::size_t k = 0; k < fd.sites.size(); ++k) {
    const auto& s = fd.sites[k];
    const std::string where = "site " + std::to_string(k + 1);
    if (s.site_id != static_cast<int>(k + 1))
      return invalid(ErrorCode::InvalidSiteLabel,
                     where + " carries label " + std::to_string(s.site_id));
    if (s.dim() != fd.d)
      return invalid(ErrorCode::DimensionMismatch, where + " has dimension " +
                                                       std::to_string(s.dim()) + ", federation d=" +
                                                       std::to_string(fd.d));
    if (s.w.size() != s.x.rows() || s.y.size() != s.x.rows())
      return invalid(ErrorCode::DimensionMismatch, where + " has ragged columns");
    if (s.size() < 1) return invalid(ErrorCode::EmptySite, where + " has no records");
    for (Eigen::Index i = 0; i < s.size(); ++i) {
      if (s.w(i) != 0 && s.w(i) != 1)
        return invalid(ErrorCode::InvalidTreatment,
                       where + " row " + std::to_string(i) + " has w=" + std::to_string(s.w(i)));
      if (!std::isfinite(s.y(i)) || !s.x.row(i).allFinite())
        return invalid(ErrorCode::NonFiniteValue, where + " row " + std::to_string(i));
    }
  }
  return {};
}

void require_valid(const FederatedDataset& fd) {
  auto v = validate_federation(fd);
  if (!v) fail(*v.code, v.message);
}

Vector site_proportions(const FederatedDataset& fd) {
  require_valid(fd);
  const double n = static_cast<double>(fd.size());
  Vector rho(static_cast<Eigen::Index>(fd.num_sites()));
  for (std::size_t k = 0; k < fd.num_sites(); ++k)
    rho(static_cast<Eigen::Index>(k)) = static_cast<double>(fd.sites[k].size()) / n;
  return rho;
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

double parse_double(const std::string& s, std::size_t line_no) {
  try {
    std::size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    fail(ErrorCode::IoError, "line " + std::to_string(line_no) + ": cannot parse '" + s + "'");
  }
}

}  // namespace

FederatedDataset read_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) fail(ErrorCode::IoError, "empty CSV input");
  const auto header = split_csv_line(line);
  if (header.size() < 4 || header[0] != "site" || header[1] != "w" || header[2] != "y")
    fail(ErrorCode::IoError, "CSV header must be site,w,y,x1,...,xd");
  const auto d = static_cast<Eigen::Index>(header.size() - 3);
  for (Eigen::Index j = 0; j < d; ++j)
    if (header[static_cast<std::size_t>(j + 3)] != "x" + std::to_string(j + 1))
      fail(ErrorCode::IoError, "unexpected covariate column '" +
                                   header[static_cast<std::size_t>(j + 3)] + "'");

  std::vector<Record> records;
  int max_site = 0;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv_line(line);
    if (static_cast<Eigen::Index>(f.size()) != d + 3)
      fail(ErrorCode::DimensionMismatch, "line " + std::to_string(line_no) + " has " +
                                             std::to_string(f.size()) + " fields");
    Record r;
    const double h = parse_double(f[0], line_no);
    const double w = parse_double(f[1], line_no);
    if (h != std::floor(h) || h < 1)
      fail(ErrorCode::InvalidSiteLabel, "line " + std::to_string(line_no));
    if (w != 0.0 && w != 1.0)
      fail(ErrorCode::InvalidTreatment, "line " + std::to_string(line_no) + " has w=" + f[1]);
    r.h = static_cast<int>(h);
    r.w = static_cast<int>(w);
    r.y = parse_double(f[2], line_no);
    r.x.resize(d);
    for (Eigen::Index j = 0; j < d; ++j)
      r.x(j) = parse_double(f[static_cast<std::size_t>(j + 3)], line_no);
    max_site = std::max(max_site, r.h);
    records.push_back(std::move(r));
  }
  if (records.empty()) fail(ErrorCode::IoError, "CSV has no records");
  auto fd = FederatedDataset::from_records(records, static_cast<std::size_t>(max_site), d);
  require_valid(fd);
  return fd;
}

FederatedDataset read_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path);
  return read_csv(in);
}

void write_csv(std::ostream& out, const FederatedDataset& fd) {
  out << "site,w,y";
  for (Eigen::Index j = 0; j < fd.d; ++j) out << ",x" << (j + 1);
  out << '\n';
  for (const auto& s : fd.sites) {
    for (Eigen::Index i = 0; i < s.size(); ++i) {
      out << s.site_id << ',' << s.w(i) << ',' << format_double(s.y(i));
      for (Eigen::Index j = 0; j < s.dim(); ++j) out << ',' << format_double(s.x(i, j));
      out << '\n';
    }
  }
}

void write_csv_file(const std::string& path, const FederatedDataset& fd) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path);
  write_csv(out, fd);
  if (!out) fail(ErrorCode::IoError, "write failed for " + path);
}

// ---------------------------------------------------------------------------

std::uint64_t stream_id(StreamPurpose purpose, std::uint64_t replication, std::uint64_t site,
                        std::uint64_t attempt) {
  return (static_cast<std::uint64_t>(purpose) << 56) | ((attempt & 0xFFu) << 48) |
         ((replication & 0xFFFFFFFFu) << 16) | (site & 0xFFFFu);
}

namespace {

std::mt19937_64 make_engine(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace

RngHandle::RngHandle(std::uint64_t seed, std::uint64_t stream)
    : seed_(seed), stream_(stream), engine_(make_engine(seed, stream)) {}

}  // namespace fedcausal
