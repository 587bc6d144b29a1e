#pragma once
// Toy task domains standing in for math, code and instruction following.
// Every example is "prompt" + "completion"; prompts end with '=' and the
// serialized training stream terminates each example with '\n'.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace maskft::corpus {

enum class Domain { arith, dyck, instr };

std::string to_string(Domain d);
Domain parse_domain(const std::string& s);

struct DomainSpec {
  Domain name = Domain::arith;
  std::size_t n_train = 4096;
  std::size_t n_val = 512;
  std::size_t n_test = 512;
  std::uint64_t seed = 0;
  // arith
  int operand_min = 0;
  int operand_max = 99;
  std::string ops = "+";
  // dyck
  std::size_t max_depth = 4;
  std::size_t max_prefix = 8;
  // instr
  std::size_t template_count = 4;
  // all domains
  std::size_t max_len = 128;

  void validate() const;
};

struct Example {
  std::string prompt;
  std::string completion;
  Domain domain = Domain::arith;
  bool operator==(const Example&) const = default;
};

using Dataset = std::vector<Example>;

struct Splits {
  Dataset train, val, test;
};

/// Deterministic in (spec). Splits never share a prompt.
Splits generate(const DomainSpec& spec);

/// Independent ground-truth checks used by tests and the data stage.
bool verify(const Example& ex);
std::string dyck_completion(const std::string& prefix);

/// Seeded sample without replacement of ceil(ratio * N) examples, kept in
/// their original order.
Dataset subset(const Dataset& data, double ratio, std::uint64_t seed);

/// Concatenation followed by a seeded shuffle.
Dataset mixup(const std::vector<Dataset>& parts, std::uint64_t seed);

/// prompt + completion + '\n' for every example, as byte tokens.
std::vector<int> token_stream(const Dataset& data);

/// Non-overlapping windows of seq_len + 1 tokens over a token stream; window i
/// starts at i * seq_len so consecutive windows share one boundary token.
class Windows {
 public:
  Windows() = default;
  Windows(std::vector<int> tokens, std::size_t seq_len);
  static Windows of(const Dataset& data, std::size_t seq_len) { return Windows(token_stream(data), seq_len); }

  std::size_t count() const { return count_; }
  std::size_t width() const { return seq_len_ + 1; }
  std::size_t seq_len() const { return seq_len_; }
  std::span<const int> window(std::size_t i) const;
  /// Windows idx[0..] back to back.
  std::vector<int> gather(std::span<const std::size_t> idx) const;

 private:
  std::vector<int> tokens_;
  std::size_t seq_len_ = 0;
  std::size_t count_ = 0;
};

/// Maps a prompt to the model's completion (without the trailing newline).
using Decoder = std::function<std::string(const std::string& prompt)>;

/// Fraction of examples whose decoded completion matches exactly.
double exact_match_eval(const Decoder& decode, const Dataset& data);

void write_tsv(const Dataset& data, const std::filesystem::path& path);
Dataset read_tsv(const std::filesystem::path& path, Domain domain);
std::string to_tsv(const Dataset& data);

}  // namespace maskft::corpus
