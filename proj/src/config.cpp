#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <variant>

#include "megl/core.hpp"

namespace megl {
namespace {

using FieldRef = std::variant<double ExperimentConfig::*, int64_t ExperimentConfig::*,
                              bool ExperimentConfig::*, std::string ExperimentConfig::*,
                              SaliencyTarget ExperimentConfig::*,
                              TextualReduction ExperimentConfig::*>;

struct Field {
  std::string_view key;
  FieldRef ref;
};

// Serialization order. Keys are stable; new keys go at the end.
const std::vector<Field>& fields() {
  using C = ExperimentConfig;
  static const std::vector<Field> table = {
      {"lambda_visual", &C::lambda_visual},
      {"lambda_textual", &C::lambda_textual},
      {"num_classes", &C::num_classes},
      {"image_size", &C::image_size},
      {"saliency_resolution", &C::saliency_resolution},
      {"vocab_size", &C::vocab_size},
      {"embed_dim", &C::embed_dim},
      {"max_text_len", &C::max_text_len},
      {"prefix_tokens", &C::prefix_tokens},
      {"num_heads", &C::num_heads},
      {"num_layers", &C::num_layers},
      {"feature_dim", &C::feature_dim},
      {"aux_feature_dim", &C::aux_feature_dim},
      {"epsilon_smoothing", &C::epsilon_smoothing},
      {"seed", &C::seed},
      {"learning_rate", &C::learning_rate},
      {"weight_decay", &C::weight_decay},
      {"batch_size", &C::batch_size},
      {"epochs", &C::epochs},
      {"num_threads", &C::num_threads},
      {"visual_on", &C::visual_on},
      {"textual_on", &C::textual_on},
      {"consistency_on", &C::consistency_on},
      {"class_conditional_prior", &C::class_conditional_prior},
      {"saliency_target", &C::saliency_target},
      {"textual_reduction", &C::textual_reduction},
      {"miou_threshold", &C::miou_threshold},
      {"bleu_smoothing", &C::bleu_smoothing},
      {"train_ratio", &C::train_ratio},
      {"val_ratio", &C::val_ratio},
      {"test_ratio", &C::test_ratio},
      {"manifest", &C::manifest},
      {"output_dir", &C::output_dir},
  };
  return table;
}

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

[[noreturn]] void parse_fail(size_t line, size_t column, const std::string& msg) {
  fail(ErrorKind::kParseError,
       "line " + std::to_string(line) + ", column " + std::to_string(column) + ": " + msg);
}

struct Cursor {
  size_t line;
  size_t column;
};

template <typename T>
T parse_number(std::string_view text, Cursor at) {
  T value{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    parse_fail(at.line, at.column, "invalid number '" + std::string(text) + "'");
  }
  return value;
}

bool parse_bool(std::string_view text, Cursor at) {
  if (text == "true" || text == "1" || text == "on") return true;
  if (text == "false" || text == "0" || text == "off") return false;
  parse_fail(at.line, at.column, "invalid boolean '" + std::string(text) + "'");
}

SaliencyTarget parse_target(std::string_view text, Cursor at) {
  if (text == "label") return SaliencyTarget::kLabel;
  if (text == "pred") return SaliencyTarget::kPrediction;
  parse_fail(at.line, at.column, "saliency_target must be label|pred");
}

TextualReduction parse_reduction(std::string_view text, Cursor at) {
  if (text == "mean") return TextualReduction::kMean;
  if (text == "sum") return TextualReduction::kSum;
  parse_fail(at.line, at.column, "textual_reduction must be mean|sum");
}

void assign(ExperimentConfig& c, const FieldRef& ref, std::string_view value, Cursor at) {
  std::visit(
      [&](auto member) {
        using T = std::remove_cvref_t<decltype(c.*member)>;
        if constexpr (std::is_same_v<T, double>) {
          c.*member = parse_number<double>(value, at);
        } else if constexpr (std::is_same_v<T, int64_t>) {
          c.*member = parse_number<int64_t>(value, at);
        } else if constexpr (std::is_same_v<T, bool>) {
          c.*member = parse_bool(value, at);
        } else if constexpr (std::is_same_v<T, std::string>) {
          if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
            value = value.substr(1, value.size() - 2);
          }
          c.*member = std::string(value);
        } else if constexpr (std::is_same_v<T, SaliencyTarget>) {
          c.*member = parse_target(value, at);
        } else {
          c.*member = parse_reduction(value, at);
        }
      },
      ref);
}

std::string render(const ExperimentConfig& c, const FieldRef& ref) {
  return std::visit(
      [&](auto member) -> std::string {
        using T = std::remove_cvref_t<decltype(c.*member)>;
        const auto& v = c.*member;
        if constexpr (std::is_same_v<T, double>) {
          return format_real(v);
        } else if constexpr (std::is_same_v<T, int64_t>) {
          return std::to_string(v);
        } else if constexpr (std::is_same_v<T, bool>) {
          return v ? "true" : "false";
        } else if constexpr (std::is_same_v<T, std::string>) {
          return v;
        } else if constexpr (std::is_same_v<T, SaliencyTarget>) {
          return v == SaliencyTarget::kLabel ? "label" : "pred";
        } else {
          return v == TextualReduction::kMean ? "mean" : "sum";
        }
      },
      ref);
}

void domain_check(bool ok, const std::string& msg) {
  if (!ok) fail(ErrorKind::kDomainError, msg);
}

}  // namespace

void validate(const ExperimentConfig& c) {
  domain_check(c.lambda_visual >= 0.0 && std::isfinite(c.lambda_visual), "lambda_visual must be >= 0");
  domain_check(c.lambda_textual >= 0.0 && std::isfinite(c.lambda_textual),
               "lambda_textual must be >= 0");
  domain_check(c.num_classes >= 1, "num_classes must be >= 1");
  domain_check(c.image_size >= 8, "image_size must be >= 8");
  domain_check(c.saliency_resolution >= 1, "saliency_resolution must be >= 1");
  domain_check(c.vocab_size > 4, "vocab_size must exceed the 4 reserved ids");
  domain_check(c.embed_dim >= 1 && c.num_heads >= 1 && c.embed_dim % c.num_heads == 0,
               "embed_dim must be a positive multiple of num_heads");
  domain_check(c.max_text_len >= 2, "max_text_len must allow BOS and EOS");
  domain_check(c.prefix_tokens >= 1, "prefix_tokens must be >= 1");
  domain_check(c.num_layers >= 1, "num_layers must be >= 1");
  domain_check(c.feature_dim >= 1 && c.aux_feature_dim >= 1, "feature dims must be positive");
  domain_check(c.epsilon_smoothing > 0.0, "epsilon_smoothing must be > 0");
  domain_check(c.seed >= 0, "seed must be >= 0");
  domain_check(c.learning_rate > 0.0, "learning_rate must be > 0");
  domain_check(c.weight_decay >= 0.0, "weight_decay must be >= 0");
  domain_check(c.batch_size >= 1, "batch_size must be >= 1");
  domain_check(c.epochs >= 0, "epochs must be >= 0");
  domain_check(c.num_threads >= 0, "num_threads must be >= 0");
  domain_check(c.miou_threshold >= 0.0 && c.miou_threshold <= 1.0, "miou_threshold must be in [0, 1]");
  domain_check(c.train_ratio >= 0 && c.val_ratio >= 0 && c.test_ratio >= 0, "ratios must be >= 0");
  domain_check(std::abs(c.train_ratio + c.val_ratio + c.test_ratio - 1.0) <= 1e-9,
               "split ratios must sum to 1");
}

ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig config;
  std::set<std::string_view> seen;
  size_t line_no = 0;
  size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const auto raw = text.substr(pos, nl == std::string_view::npos ? text.size() - pos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;

    auto line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    if (trim(line).empty()) continue;

    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      parse_fail(line_no, line.find_first_not_of(" \t") + 1, "expected 'key = value'");
    }
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) parse_fail(line_no, 1, "empty key");
    const auto value_part = line.substr(eq + 1);
    const auto value = trim(value_part);
    const auto lead = value_part.find_first_not_of(" \t");
    const size_t value_col = eq + 2 + (lead == std::string_view::npos ? 0 : lead);

    const auto& table = fields();
    const auto it = std::find_if(table.begin(), table.end(),
                                 [&](const Field& f) { return f.key == key; });
    if (it == table.end()) {
      fail(ErrorKind::kUnknownKey, "line " + std::to_string(line_no) + ": '" + std::string(key) + "'");
    }
    if (!seen.insert(it->key).second) {
      parse_fail(line_no, 1, "duplicate key '" + std::string(key) + "'");
    }
    assign(config, it->ref, value, Cursor{line_no, value_col});
  }
  validate(config);
  return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kMissingFile, "cannot open config '" + path.string() + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str());
}

std::string serialize_config(const ExperimentConfig& config) {
  std::string out = "# megl experiment config\n";
  for (const auto& f : fields()) {
    out += std::string(f.key) + " = " + render(config, f.ref) + "\n";
  }
  return out;
}

void save_config(const ExperimentConfig& config, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kMissingFile, "cannot write config '" + path.string() + "'");
  out << serialize_config(config);
}

uint64_t config_hash(const ExperimentConfig& config) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : serialize_config(config)) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace megl
