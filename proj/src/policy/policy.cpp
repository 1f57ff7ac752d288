#include "loop/policy.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <unordered_set>

#include "loop/error.hpp"

namespace loop {

namespace {

constexpr char kMagic[8] = {'L', 'O', 'O', 'P', 'P', 'O', 'L', '\0'};
constexpr std::uint32_t kFormatVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char bytes[4];
  for (int i = 0; i < 4; ++i) bytes[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFFu);
  out.write(reinterpret_cast<const char*>(bytes), 4);
}

std::uint32_t read_u32(std::istream& in) {
  unsigned char bytes[4];
  in.read(reinterpret_cast<char*>(bytes), 4);
  if (!in) throw MalformedInput("policy file: truncated header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[i]) << (8 * i);
  return v;
}

void write_f64(std::ostream& out, double value) {
  auto bits = std::bit_cast<std::uint64_t>(value);
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFFu);
  out.write(reinterpret_cast<const char*>(bytes), 8);
}

double read_f64(std::istream& in) {
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  if (!in) throw MalformedInput("policy file: truncated weights");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

Vocab::Vocab(std::vector<std::string> symbols, Token stop, Token separator)
    : symbols_(std::move(symbols)), stop_(stop), separator_(separator) {
  if (symbols_.size() < 8) throw MalformedInput("vocab needs at least 8 symbols");
  for (std::size_t i = 0; i < symbols_.size(); ++i) {
    auto [it, inserted] = index_.emplace(symbols_[i], static_cast<Token>(i));
    if (!inserted) throw MalformedInput("duplicate vocab symbol: " + symbols_[i]);
  }
  if (!valid(stop_) || !valid(separator_) || stop_ == separator_) {
    throw MalformedInput("vocab stop/separator index out of range");
  }
}

const std::string& Vocab::symbol(Token t) const {
  if (!valid(t)) throw MalformedInput("token index out of range: " + std::to_string(t));
  return symbols_[static_cast<std::size_t>(t)];
}

std::optional<Token> Vocab::find(std::string_view symbol) const {
  auto it = index_.find(std::string(symbol));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

Token Vocab::at(std::string_view symbol) const {
  auto t = find(symbol);
  if (!t) throw MalformedInput("unknown symbol: " + std::string(symbol));
  return *t;
}

std::vector<Token> Vocab::encode(std::span<const std::string> symbols) const {
  std::vector<Token> out;
  out.reserve(symbols.size());
  for (const auto& s : symbols) out.push_back(at(s));
  return out;
}

std::vector<std::string> Vocab::decode(std::span<const Token> tokens) const {
  std::vector<std::string> out;
  out.reserve(tokens.size());
  for (Token t : tokens) out.push_back(symbol(t));
  return out;
}

PolicyParams::PolicyParams(std::shared_ptr<const Vocab> vocab, FeatureConfig features)
    : vocab_(std::move(vocab)), features_(features) {
  if (!vocab_) throw ContractViolation("PolicyParams: null vocab");
  if (features_.window < 1) throw ContractViolation("FeatureConfig: window must be >= 1");
  weights_ = Matrix::Zero(static_cast<Eigen::Index>(vocab_->size()),
                          static_cast<Eigen::Index>(features_.dim(vocab_->size())));
}

SparseFeatures sparse_featurize(std::span<const Token> context, const FeatureConfig& features,
                                std::size_t vocab_size) {
  const std::size_t m = static_cast<std::size_t>(features.window);
  SparseFeatures phi;
  phi.columns.reserve(m + 1);
  const std::size_t n = context.size();
  for (std::size_t k = 1; k <= m && k <= n; ++k) {
    Token t = context[n - k];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) {
      throw MalformedInput("featurize: invalid token " + std::to_string(t));
    }
    phi.columns.push_back((k - 1) * vocab_size + static_cast<std::size_t>(t));
  }
  phi.columns.push_back(m * vocab_size);
  return phi;
}

SparseFeatures sparse_featurize(std::span<const Token> context, const FeatureConfig& features,
                                const Vocab& vocab) {
  return sparse_featurize(context, features, vocab.size());
}

Vector featurize(std::span<const Token> context, const FeatureConfig& features, std::size_t vocab_size) {
  auto phi = sparse_featurize(context, features, vocab_size);
  Vector dense = Vector::Zero(static_cast<Eigen::Index>(features.dim(vocab_size)));
  for (auto c : phi.columns) dense[static_cast<Eigen::Index>(c)] = 1.0;
  return dense;
}

Vector featurize(std::span<const Token> context, const FeatureConfig& features, const Vocab& vocab) {
  return featurize(context, features, vocab.size());
}

Vector logits(const PolicyParams& params, const SparseFeatures& phi) {
  const auto& w = params.weights();
  Vector z = Vector::Zero(w.rows());
  for (auto c : phi.columns) z += w.col(static_cast<Eigen::Index>(c));
  return z;
}

Vector log_softmax(const Vector& z) {
  if (!z.allFinite()) throw NumericalError("log_softmax: non-finite logits");
  const double max = z.maxCoeff();
  const double log_norm = max + std::log((z.array() - max).exp().sum());
  return z.array() - log_norm;
}

Vector logprobs(const PolicyParams& params, const SparseFeatures& phi) {
  return log_softmax(logits(params, phi));
}

Vector logprobs(const PolicyParams& params, std::span<const Token> context) {
  return logprobs(params, sparse_featurize(context, params.features(), params.vocab()));
}

Token sample_token(const Vector& logp, double temperature, Rng& rng) {
  if (logp.size() == 0) throw MalformedInput("sample_token: empty distribution");
  if (!(temperature >= 0.0)) throw ContractViolation("sample_token: negative temperature");
  if (temperature == 0.0) {
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < logp.size(); ++i) {
      if (logp[i] > logp[best]) best = i;
    }
    return static_cast<Token>(best);
  }
  Vector scaled = logp / temperature;
  Vector p = log_softmax(scaled).array().exp();
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  double u = uniform(rng);
  double cumulative = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    cumulative += p[i];
    if (u < cumulative) return static_cast<Token>(i);
  }
  // Rounding left u above the final partial sum; return the last token with mass.
  for (Eigen::Index i = p.size() - 1; i >= 0; --i) {
    if (p[i] > 0.0) return static_cast<Token>(i);
  }
  return static_cast<Token>(p.size() - 1);
}

void accumulate_score(Matrix& grad, const Vector& logp, const SparseFeatures& phi, Token token,
                      double scale) {
  Vector delta = -logp.array().exp() * scale;
  delta[token] += scale;
  for (auto c : phi.columns) grad.col(static_cast<Eigen::Index>(c)) += delta;
}

Matrix grad_logprob(const PolicyParams& params, std::span<const Token> context, Token token) {
  if (!params.vocab().valid(token)) throw MalformedInput("grad_logprob: invalid token");
  auto phi = sparse_featurize(context, params.features(), params.vocab());
  Matrix grad = params.zeros_like();
  accumulate_score(grad, logprobs(params, phi), phi, token, 1.0);
  return grad;
}

void save_params(const PolicyParams& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out.write(kMagic, sizeof(kMagic));
  write_u32(out, kFormatVersion);
  write_u32(out, static_cast<std::uint32_t>(params.rows()));
  write_u32(out, static_cast<std::uint32_t>(params.cols()));
  write_u32(out, static_cast<std::uint32_t>(params.features().window));
  const auto& w = params.weights();
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    for (Eigen::Index c = 0; c < w.cols(); ++c) write_f64(out, w(r, c));
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

PolicyParams load_params(const std::filesystem::path& path, std::shared_ptr<const Vocab> vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MalformedInput("cannot open policy file: " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw MalformedInput("not a policy file: " + path.string());
  }
  const auto version = read_u32(in);
  if (version != kFormatVersion) {
    throw MalformedInput("unsupported policy file version " + std::to_string(version));
  }
  const auto v = read_u32(in);
  const auto d = read_u32(in);
  const auto m = read_u32(in);
  if (v != vocab->size()) throw MalformedInput("policy file vocab size does not match");
  FeatureConfig features{static_cast<int>(m)};
  if (m < 1 || d != features.dim(v)) throw MalformedInput("policy file header is inconsistent");
  PolicyParams params(std::move(vocab), features);
  auto& w = params.weights();
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = read_f64(in);
  }
  if (!params.all_finite()) throw NumericalError("policy file contains non-finite weights");
  return params;
}

void export_params_text(const PolicyParams& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << std::setprecision(17);
  const auto& w = params.weights();
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    out << params.vocab().symbol(static_cast<Token>(r)) << '\t';
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      if (c) out << ' ';
      out << w(r, c);
    }
    out << '\n';
  }
}

}  // namespace loop
