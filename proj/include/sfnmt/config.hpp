#pragma once

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sfnmt/errors.hpp"

namespace sfnmt {

enum class FusionVariant { None, Cga, LinearAttention, DsConcat, DsSum };
enum class InteractionMode { Slow, Fast, GatedBoth };
enum class RelposMode { Boundary, Vanilla, None };
enum class FastInput { Character, Subword };

inline std::string to_string(FusionVariant v) {
  switch (v) {
    case FusionVariant::None: return "none";
    case FusionVariant::Cga: return "cga";
    case FusionVariant::LinearAttention: return "linear_attention";
    case FusionVariant::DsConcat: return "ds_concat";
    case FusionVariant::DsSum: return "ds_sum";
  }
  return "?";
}

inline std::string to_string(InteractionMode m) {
  switch (m) {
    case InteractionMode::Slow: return "slow";
    case InteractionMode::Fast: return "fast";
    case InteractionMode::GatedBoth: return "gated_both";
  }
  return "?";
}

inline std::string to_string(RelposMode m) {
  switch (m) {
    case RelposMode::Boundary: return "boundary";
    case RelposMode::Vanilla: return "vanilla";
    case RelposMode::None: return "none";
  }
  return "?";
}

inline std::string to_string(FastInput f) {
  return f == FastInput::Character ? "character" : "subword";
}

inline FusionVariant fusion_variant_from(const std::string& s) {
  if (s == "none") return FusionVariant::None;
  if (s == "cga") return FusionVariant::Cga;
  if (s == "linear_attention") return FusionVariant::LinearAttention;
  if (s == "ds_concat") return FusionVariant::DsConcat;
  if (s == "ds_sum") return FusionVariant::DsSum;
  throw ConfigError("unknown fusion_variant: " + s);
}

inline InteractionMode interaction_mode_from(const std::string& s) {
  if (s == "slow") return InteractionMode::Slow;
  if (s == "fast") return InteractionMode::Fast;
  if (s == "gated_both") return InteractionMode::GatedBoth;
  throw ConfigError("unknown interaction_mode: " + s);
}

inline RelposMode relpos_mode_from(const std::string& s) {
  if (s == "boundary") return RelposMode::Boundary;
  if (s == "vanilla") return RelposMode::Vanilla;
  if (s == "none") return RelposMode::None;
  throw ConfigError("unknown relpos_mode: " + s);
}

inline FastInput fast_input_from(const std::string& s) {
  if (s == "character") return FastInput::Character;
  if (s == "subword") return FastInput::Subword;
  throw ConfigError("unknown fast_input: " + s);
}

// Full architecture hyperparameter record. The desk-scale defaults below are
// the documented small profile; the full-scale profile (hidden 512, 6
// layers, 16k warmup) is reachable through the same keys.
struct ModelConfig {
  std::size_t hidden_slow = 64;
  std::size_t hidden_fast = 16;
  std::size_t ffn_slow = 0;  // 0 -> 4 * hidden_slow
  std::size_t ffn_fast = 0;  // 0 -> 4 * hidden_fast
  std::size_t heads_slow = 4;
  std::size_t heads_fast = 2;
  std::size_t layers = 2;
  std::size_t decoder_layers = 2;

  std::size_t vocab_subword = 0;
  std::size_t vocab_char = 0;
  std::size_t vocab_target = 0;

  FusionVariant fusion_variant = FusionVariant::Cga;
  bool cga_bidirectional = true;
  std::vector<bool> fusion_layer_mask;  // empty -> fusion in every block
  InteractionMode interaction_mode = InteractionMode::Slow;
  RelposMode relpos_mode = RelposMode::Boundary;
  int relpos_window = 3;
  FastInput fast_input = FastInput::Character;

  double dropout_residual = 0.1;
  double dropout_attention = 0.1;
  double dropout_activation = 0.1;

  std::size_t max_positions = 256;

  std::size_t ffn_slow_dim() const { return ffn_slow ? ffn_slow : 4 * hidden_slow; }
  std::size_t ffn_fast_dim() const { return ffn_fast ? ffn_fast : 4 * hidden_fast; }
  std::size_t fast_vocab() const {
    return fast_input == FastInput::Character ? vocab_char : vocab_subword;
  }

  bool fusion_at(std::size_t layer) const {
    if (fusion_variant == FusionVariant::None) return false;
    if (fusion_layer_mask.empty()) return true;
    return fusion_layer_mask.at(layer);
  }

  void validate() const {
    if (hidden_slow % heads_slow != 0)
      throw ConfigError("hidden_slow must be divisible by heads_slow");
    if (hidden_fast % heads_fast != 0)
      throw ConfigError("hidden_fast must be divisible by heads_fast");
    if (hidden_fast > hidden_slow)
      throw ConfigError("hidden_fast must not exceed hidden_slow");
    if (!fusion_layer_mask.empty() && fusion_layer_mask.size() != layers)
      throw ConfigError("fusion_layer_mask length must equal layers");
    if (relpos_window < 1) throw ConfigError("relpos_window must be >= 1");
    for (double p : {dropout_residual, dropout_attention, dropout_activation})
      if (p < 0.0 || p >= 1.0) throw ConfigError("dropout rates must be in [0,1)");
  }
};

struct TrainConfig {
  double peak_lr = 5e-4;          // full-scale profile: 0.002
  std::size_t warmup_steps = 400; // full-scale profile: 16000
  std::size_t max_tokens = 512;   // source+target subwords per batch
  double label_smoothing = 0.1;
  std::uint64_t seed = 1;
  std::size_t max_steps = 2000;
  std::size_t checkpoint_every = 1000;
  std::size_t bpe_merges = 100;

  void validate() const {
    if (warmup_steps < 1) throw ConfigError("warmup_steps must be >= 1");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0)
      throw ConfigError("label_smoothing must be in [0,1)");
  }
};

// --- flat sectioned key=value config file -------------------------------
//
//   [model]
//   hidden_slow = 64
//   fusion_variant = cga
//   fusion_layer_mask = 1,1
//   [training]
//   peak_lr = 5e-4
//
// Unknown keys are hard errors so ablation typos cannot silently no-op.

namespace detail {

inline std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline bool parse_bool(const std::string& v, int line) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("line " + std::to_string(line) + ": expected bool, got '" + v + "'");
}

inline std::vector<bool> parse_mask(const std::string& v, int line) {
  std::vector<bool> out;
  std::stringstream ss(v);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    out.push_back(parse_bool(tok, line));
  }
  return out;
}

}  // namespace detail

struct FullConfig {
  ModelConfig model;
  TrainConfig training;
};

inline FullConfig parse_config(std::istream& in, const std::string& source = "<config>") {
  FullConfig cfg;
  std::string line, section;
  int line_no = 0;
  auto fail = [&](const std::string& msg) {
    throw ConfigError(source + ":" + std::to_string(line_no) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++line_no;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail("malformed section header");
      section = line.substr(1, line.size() - 2);
      if (section != "model" && section != "training")
        fail("unknown section [" + section + "]");
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected key = value");
    std::string key = detail::trim(line.substr(0, eq));
    std::string val = detail::trim(line.substr(eq + 1));
    if (val.size() >= 2 && val.front() == '"' && val.back() == '"')
      val = val.substr(1, val.size() - 2);
    try {
      if (section == "model") {
        ModelConfig& m = cfg.model;
        if (key == "hidden_slow") m.hidden_slow = std::stoul(val);
        else if (key == "hidden_fast") m.hidden_fast = std::stoul(val);
        else if (key == "ffn_slow") m.ffn_slow = std::stoul(val);
        else if (key == "ffn_fast") m.ffn_fast = std::stoul(val);
        else if (key == "heads_slow") m.heads_slow = std::stoul(val);
        else if (key == "heads_fast") m.heads_fast = std::stoul(val);
        else if (key == "layers") m.layers = std::stoul(val);
        else if (key == "decoder_layers") m.decoder_layers = std::stoul(val);
        else if (key == "vocab_subword") m.vocab_subword = std::stoul(val);
        else if (key == "vocab_char") m.vocab_char = std::stoul(val);
        else if (key == "vocab_target") m.vocab_target = std::stoul(val);
        else if (key == "fusion_variant") m.fusion_variant = fusion_variant_from(val);
        else if (key == "cga_bidirectional") m.cga_bidirectional = detail::parse_bool(val, line_no);
        else if (key == "fusion_layer_mask") m.fusion_layer_mask = detail::parse_mask(val, line_no);
        else if (key == "interaction_mode") m.interaction_mode = interaction_mode_from(val);
        else if (key == "relpos_mode") m.relpos_mode = relpos_mode_from(val);
        else if (key == "relpos_window") m.relpos_window = std::stoi(val);
        else if (key == "fast_input") m.fast_input = fast_input_from(val);
        else if (key == "dropout_residual") m.dropout_residual = std::stod(val);
        else if (key == "dropout_attention") m.dropout_attention = std::stod(val);
        else if (key == "dropout_activation") m.dropout_activation = std::stod(val);
        else if (key == "max_positions") m.max_positions = std::stoul(val);
        else fail("unknown key '" + key + "' in [model]");
      } else if (section == "training") {
        TrainConfig& t = cfg.training;
        if (key == "peak_lr") t.peak_lr = std::stod(val);
        else if (key == "warmup_steps") t.warmup_steps = std::stoul(val);
        else if (key == "max_tokens") t.max_tokens = std::stoul(val);
        else if (key == "label_smoothing") t.label_smoothing = std::stod(val);
        else if (key == "seed") t.seed = std::stoull(val);
        else if (key == "max_steps") t.max_steps = std::stoul(val);
        else if (key == "checkpoint_every") t.checkpoint_every = std::stoul(val);
        else if (key == "bpe_merges") t.bpe_merges = std::stoul(val);
        else fail("unknown key '" + key + "' in [training]");
      } else {
        fail("key '" + key + "' outside any section");
      }
    } catch (const std::invalid_argument&) {
      fail("cannot parse value '" + val + "' for key '" + key + "'");
    } catch (const std::out_of_range&) {
      fail("value out of range for key '" + key + "'");
    }
  }
  cfg.model.validate();
  cfg.training.validate();
  return cfg;
}

inline FullConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config: " + path);
  return parse_config(in, path);
}

inline void write_config(const FullConfig& cfg, std::ostream& out) {
  out.precision(17);  // doubles survive a write/parse round trip exactly
  const ModelConfig& m = cfg.model;
  out << "[model]\n";
  out << "hidden_slow = " << m.hidden_slow << "\n";
  out << "hidden_fast = " << m.hidden_fast << "\n";
  out << "ffn_slow = " << m.ffn_slow << "\n";
  out << "ffn_fast = " << m.ffn_fast << "\n";
  out << "heads_slow = " << m.heads_slow << "\n";
  out << "heads_fast = " << m.heads_fast << "\n";
  out << "layers = " << m.layers << "\n";
  out << "decoder_layers = " << m.decoder_layers << "\n";
  if (m.vocab_subword) out << "vocab_subword = " << m.vocab_subword << "\n";
  if (m.vocab_char) out << "vocab_char = " << m.vocab_char << "\n";
  if (m.vocab_target) out << "vocab_target = " << m.vocab_target << "\n";
  out << "fusion_variant = " << to_string(m.fusion_variant) << "\n";
  out << "cga_bidirectional = " << (m.cga_bidirectional ? "true" : "false") << "\n";
  if (!m.fusion_layer_mask.empty()) {
    out << "fusion_layer_mask = ";
    for (std::size_t i = 0; i < m.fusion_layer_mask.size(); ++i)
      out << (i ? "," : "") << (m.fusion_layer_mask[i] ? "1" : "0");
    out << "\n";
  }
  out << "interaction_mode = " << to_string(m.interaction_mode) << "\n";
  out << "relpos_mode = " << to_string(m.relpos_mode) << "\n";
  out << "relpos_window = " << m.relpos_window << "\n";
  out << "fast_input = " << to_string(m.fast_input) << "\n";
  out << "dropout_residual = " << m.dropout_residual << "\n";
  out << "dropout_attention = " << m.dropout_attention << "\n";
  out << "dropout_activation = " << m.dropout_activation << "\n";
  out << "max_positions = " << m.max_positions << "\n";
  const TrainConfig& t = cfg.training;
  out << "[training]\n";
  out << "peak_lr = " << t.peak_lr << "\n";
  out << "warmup_steps = " << t.warmup_steps << "\n";
  out << "max_tokens = " << t.max_tokens << "\n";
  out << "label_smoothing = " << t.label_smoothing << "\n";
  out << "seed = " << t.seed << "\n";
  out << "max_steps = " << t.max_steps << "\n";
  out << "checkpoint_every = " << t.checkpoint_every << "\n";
  out << "bpe_merges = " << t.bpe_merges << "\n";
}

}  // namespace sfnmt
