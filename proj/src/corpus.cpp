#include "maskft/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "maskft/io.hpp"
#include "maskft/rng.hpp"

namespace maskft::corpus {

std::string to_string(Domain d) {
  switch (d) {
    case Domain::arith: return "arith";
    case Domain::dyck: return "dyck";
    case Domain::instr: return "instr";
  }
  return "?";
}

Domain parse_domain(const std::string& s) {
  if (s == "arith") return Domain::arith;
  if (s == "dyck") return Domain::dyck;
  if (s == "instr") return Domain::instr;
  throw std::invalid_argument("unknown domain '" + s + "'");
}

void DomainSpec::validate() const {
  if (n_train < 1 || n_val < 1 || n_test < 1) throw std::invalid_argument("split sizes must be >= 1");
  if (operand_min > operand_max) throw std::invalid_argument("operand_min > operand_max");
  if (ops.empty() || ops.find_first_not_of("+-*") != std::string::npos) {
    throw std::invalid_argument("ops must be a non-empty subset of \"+-*\"");
  }
  if (max_depth < 1 || max_prefix < 1) throw std::invalid_argument("dyck knobs must be >= 1");
  if (template_count < 1 || template_count > 4) throw std::invalid_argument("template_count must be in [1, 4]");
  if (max_len < 4) throw std::invalid_argument("max_len too small");
}

namespace {

constexpr const char* kTemplates[] = {"repeat twice: ", "uppercase: ", "reverse: ", "first letter: "};

std::string apply_template(std::size_t which, const std::string& word) {
  switch (which) {
    case 0: return word + " " + word;
    case 1: {
      std::string up = word;
      for (char& c : up) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
      return up;
    }
    case 2: return std::string(word.rbegin(), word.rend());
    default: return word.substr(0, 1);
  }
}

char closer_of(char open) {
  switch (open) {
    case '(': return ')';
    case '[': return ']';
    default: return '}';
  }
}

Example make_arith(const DomainSpec& s, Rng& rng) {
  const long long a = rng.between(s.operand_min, s.operand_max);
  const long long b = rng.between(s.operand_min, s.operand_max);
  const char op = s.ops[rng.below(s.ops.size())];
  const long long r = op == '+' ? a + b : (op == '-' ? a - b : a * b);
  return {std::to_string(a) + op + std::to_string(b) + "=", std::to_string(r), Domain::arith};
}

Example make_dyck(const DomainSpec& s, Rng& rng) {
  static constexpr char opens[] = {'(', '[', '{'};
  const std::size_t len = 1 + rng.below(s.max_prefix);
  std::string prefix;
  std::string stack;
  for (std::size_t i = 0; i < len; ++i) {
    const bool open = stack.empty() || (stack.size() < s.max_depth && rng.below(2) == 0);
    if (open) {
      const char c = opens[rng.below(3)];
      prefix.push_back(c);
      stack.push_back(c);
    } else {
      prefix.push_back(closer_of(stack.back()));
      stack.pop_back();
    }
  }
  if (stack.empty()) {
    const char c = opens[rng.below(3)];
    prefix.push_back(c);
  }
  return {prefix + "=", dyck_completion(prefix), Domain::dyck};
}

Example make_instr(const DomainSpec& s, Rng& rng) {
  const std::size_t which = rng.below(s.template_count);
  const std::size_t len = 3 + rng.below(4);
  std::string word;
  for (std::size_t i = 0; i < len; ++i) word.push_back(static_cast<char>('a' + rng.below(26)));
  return {std::string(kTemplates[which]) + word + "=", apply_template(which, word), Domain::instr};
}

Example make_one(const DomainSpec& s, Rng& rng) {
  switch (s.name) {
    case Domain::arith: return make_arith(s, rng);
    case Domain::dyck: return make_dyck(s, rng);
    case Domain::instr: return make_instr(s, rng);
  }
  throw std::logic_error("unhandled domain");
}

void fill(const DomainSpec& s, std::uint64_t stream, std::size_t n, std::unordered_set<std::string>& seen,
          Dataset& out) {
  Rng rng(Rng::derive(s.seed, stream));
  const std::size_t max_attempts = 200 * n + 1000;
  std::size_t attempts = 0;
  while (out.size() < n) {
    if (++attempts > max_attempts) {
      throw std::invalid_argument("domain '" + to_string(s.name) + "' cannot supply " + std::to_string(n) +
                                  " distinct examples for this split; widen the difficulty knobs");
    }
    Example ex = make_one(s, rng);
    if (ex.prompt.size() + ex.completion.size() + 1 > s.max_len) continue;
    if (!seen.insert(ex.prompt).second) continue;
    out.push_back(std::move(ex));
  }
}

}  // namespace

std::string dyck_completion(const std::string& prefix) {
  std::string stack;
  for (char c : prefix) {
    if (c == '(' || c == '[' || c == '{') {
      stack.push_back(c);
    } else {
      if (stack.empty() || closer_of(stack.back()) != c) throw std::invalid_argument("invalid dyck prefix '" + prefix + "'");
      stack.pop_back();
    }
  }
  std::string out;
  for (auto it = stack.rbegin(); it != stack.rend(); ++it) out.push_back(closer_of(*it));
  return out;
}

Splits generate(const DomainSpec& spec) {
  spec.validate();
  Splits s;
  std::unordered_set<std::string> seen;
  fill(spec, 0, spec.n_train, seen, s.train);
  fill(spec, 1, spec.n_val, seen, s.val);
  fill(spec, 2, spec.n_test, seen, s.test);
  return s;
}

bool verify(const Example& ex) {
  if (ex.completion.empty() || ex.prompt.empty() || ex.prompt.back() != '=') return false;
  const std::string body = ex.prompt.substr(0, ex.prompt.size() - 1);
  switch (ex.domain) {
    case Domain::arith: {
      std::size_t pos = 0;
      while (pos < body.size() && std::isdigit(static_cast<unsigned char>(body[pos]))) ++pos;
      if (pos == 0 || pos >= body.size()) return false;
      const char op = body[pos];
      const std::string rhs = body.substr(pos + 1);
      if (rhs.empty() || !std::all_of(rhs.begin(), rhs.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
        return false;
      }
      const long long a = std::stoll(body.substr(0, pos));
      const long long b = std::stoll(rhs);
      long long r = 0;
      if (op == '+') r = a + b;
      else if (op == '-') r = a - b;
      else if (op == '*') r = a * b;
      else return false;
      return ex.completion == std::to_string(r);
    }
    case Domain::dyck: {
      // Balanced overall, and the completion only closes.
      std::string stack;
      for (char c : body + ex.completion) {
        if (c == '(' || c == '[' || c == '{') {
          stack.push_back(c);
        } else if (c == ')' || c == ']' || c == '}') {
          if (stack.empty() || closer_of(stack.back()) != c) return false;
          stack.pop_back();
        } else {
          return false;
        }
      }
      return stack.empty() && ex.completion.find_first_of("([{") == std::string::npos;
    }
    case Domain::instr: {
      for (std::size_t t = 0; t < 4; ++t) {
        const std::string head = kTemplates[t];
        if (body.rfind(head, 0) == 0) return ex.completion == apply_template(t, body.substr(head.size()));
      }
      return false;
    }
  }
  return false;
}

Dataset subset(const Dataset& data, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw std::invalid_argument("subset ratio must lie in (0, 1]");
  if (ratio == 1.0) return data;
  const auto k = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(data.size()) - 1e-9));
  Rng rng(seed);
  std::vector<std::size_t> perm = rng.permutation(data.size());
  perm.resize(std::min(k, data.size()));
  std::sort(perm.begin(), perm.end());
  Dataset out;
  out.reserve(perm.size());
  for (std::size_t i : perm) out.push_back(data[i]);
  return out;
}

Dataset mixup(const std::vector<Dataset>& parts, std::uint64_t seed) {
  Dataset all;
  for (const Dataset& p : parts) all.insert(all.end(), p.begin(), p.end());
  Rng rng(seed);
  const std::vector<std::size_t> perm = rng.permutation(all.size());
  Dataset out;
  out.reserve(all.size());
  for (std::size_t i : perm) out.push_back(all[i]);
  return out;
}

std::vector<int> token_stream(const Dataset& data) {
  std::vector<int> out;
  for (const Example& ex : data) {
    for (char c : ex.prompt) out.push_back(static_cast<unsigned char>(c));
    for (char c : ex.completion) out.push_back(static_cast<unsigned char>(c));
    out.push_back('\n');
  }
  return out;
}

Windows::Windows(std::vector<int> tokens, std::size_t seq_len) : tokens_(std::move(tokens)), seq_len_(seq_len) {
  if (seq_len < 1) throw std::invalid_argument("window length must be >= 1");
  count_ = tokens_.size() > seq_len ? (tokens_.size() - 1) / seq_len : 0;
  if (count_ == 0) {
    throw std::invalid_argument("token stream of " + std::to_string(tokens_.size()) +
                                " tokens is too short for one window of " + std::to_string(seq_len + 1));
  }
}

std::span<const int> Windows::window(std::size_t i) const {
  if (i >= count_) throw std::out_of_range("window index out of range");
  return {tokens_.data() + i * seq_len_, seq_len_ + 1};
}

std::vector<int> Windows::gather(std::span<const std::size_t> idx) const {
  std::vector<int> out;
  out.reserve(idx.size() * width());
  for (std::size_t i : idx) {
    const auto w = window(i);
    out.insert(out.end(), w.begin(), w.end());
  }
  return out;
}

double exact_match_eval(const Decoder& decode, const Dataset& data) {
  if (data.empty()) throw std::invalid_argument("exact-match evaluation on an empty dataset");
  std::size_t hits = 0;
  for (const Example& ex : data) {
    if (decode(ex.prompt) == ex.completion) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

std::string to_tsv(const Dataset& data) {
  std::string out;
  for (const Example& ex : data) out += ex.prompt + "\t" + ex.completion + "\n";
  return out;
}

void write_tsv(const Dataset& data, const std::filesystem::path& path) { io::write_file(path, to_tsv(data)); }

Dataset read_tsv(const std::filesystem::path& path, Domain domain) {
  std::istringstream in(io::read_file(path));
  Dataset out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": missing tab separator");
    }
    out.push_back({line.substr(0, tab), line.substr(tab + 1), domain});
  }
  return out;
}

}  // namespace maskft::corpus
