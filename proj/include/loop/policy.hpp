#ifndef LOOP_POLICY_HPP_
#define LOOP_POLICY_HPP_

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

namespace loop {

using Token = std::int32_t;
// Column-major so the weights of one feature column are contiguous.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Rng = std::mt19937_64;

// Ordered token alphabet with two distinguished symbols: the stop token that
// ends an agent turn and the separator between commands inside a turn.
class Vocab {
 public:
  Vocab(std::vector<std::string> symbols, Token stop, Token separator);

  std::size_t size() const { return symbols_.size(); }
  const std::string& symbol(Token t) const;
  std::optional<Token> find(std::string_view symbol) const;
  // Throws MalformedInput for unknown symbols.
  Token at(std::string_view symbol) const;
  bool valid(Token t) const { return t >= 0 && static_cast<std::size_t>(t) < symbols_.size(); }

  Token stop() const { return stop_; }
  Token separator() const { return separator_; }
  const std::vector<std::string>& symbols() const { return symbols_; }

  std::vector<Token> encode(std::span<const std::string> symbols) const;
  std::vector<std::string> decode(std::span<const Token> tokens) const;

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.symbols_ == b.symbols_; }

 private:
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, Token> index_;
  Token stop_;
  Token separator_;
};

// Sliding window of `window` one-hot token slots plus one always-on bias.
// Slot k (k = 1..window) holds the token at offset -k and occupies columns
// [(k-1)*V, k*V); the bias is column window*V.
struct FeatureConfig {
  int window = 4;

  std::size_t dim(std::size_t vocab_size) const {
    return static_cast<std::size_t>(window) * vocab_size + 1;
  }
};

// Active (value 1) columns of the feature vector; at most window+1 entries,
// the bias column last.
struct SparseFeatures {
  std::vector<std::size_t> columns;
};

class PolicyParams {
 public:
  // All-zero weights: the uniform policy.
  PolicyParams(std::shared_ptr<const Vocab> vocab, FeatureConfig features);

  const Vocab& vocab() const { return *vocab_; }
  const std::shared_ptr<const Vocab>& vocab_ptr() const { return vocab_; }
  const FeatureConfig& features() const { return features_; }
  std::size_t rows() const { return static_cast<std::size_t>(weights_.rows()); }
  std::size_t cols() const { return static_cast<std::size_t>(weights_.cols()); }

  const Matrix& weights() const { return weights_; }
  Matrix& weights() { return weights_; }

  Matrix zeros_like() const { return Matrix::Zero(weights_.rows(), weights_.cols()); }
  bool all_finite() const { return weights_.allFinite(); }

 private:
  std::shared_ptr<const Vocab> vocab_;
  FeatureConfig features_;
  Matrix weights_;
};

SparseFeatures sparse_featurize(std::span<const Token> context, const FeatureConfig& features,
                                const Vocab& vocab);
Vector featurize(std::span<const Token> context, const FeatureConfig& features, const Vocab& vocab);
// Layout-only forms over an alphabet of `vocab_size` symbols.
SparseFeatures sparse_featurize(std::span<const Token> context, const FeatureConfig& features,
                                std::size_t vocab_size);
Vector featurize(std::span<const Token> context, const FeatureConfig& features, std::size_t vocab_size);

Vector logits(const PolicyParams& params, const SparseFeatures& phi);
// Log-softmax with max subtraction. Throws NumericalError on non-finite logits.
Vector log_softmax(const Vector& logits);
Vector logprobs(const PolicyParams& params, std::span<const Token> context);
Vector logprobs(const PolicyParams& params, const SparseFeatures& phi);

// Temperature 0 is argmax with ties broken toward the lowest index.
Token sample_token(const Vector& logprobs, double temperature, Rng& rng);

// d log p(token | context) / dW as a dense V x d matrix.
Matrix grad_logprob(const PolicyParams& params, std::span<const Token> context, Token token);

// grad += scale * (e_token - p) outer phi, touching only the active columns.
void accumulate_score(Matrix& grad, const Vector& logp, const SparseFeatures& phi, Token token,
                      double scale);

// Binary format: "LOOPPOL\0", u32 version, u32 V, u32 d, u32 window, then V*d
// little-endian float64 weights in row-major order.
void save_params(const PolicyParams& params, const std::filesystem::path& path);
PolicyParams load_params(const std::filesystem::path& path, std::shared_ptr<const Vocab> vocab);
// One line per vocab entry: symbol, tab, space separated weights.
void export_params_text(const PolicyParams& params, const std::filesystem::path& path);

}  // namespace loop

#endif  // LOOP_POLICY_HPP_
