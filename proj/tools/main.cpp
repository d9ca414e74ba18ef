// Command-line front end: train, translate, eval, stats, gradcheck, flops.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sfnmt/beam.hpp"
#include "sfnmt/bleu.hpp"
#include "sfnmt/checkpoint.hpp"
#include "sfnmt/flops.hpp"
#include "sfnmt/gradcheck.hpp"
#include "sfnmt/model.hpp"
#include "sfnmt/training.hpp"

namespace fs = std::filesystem;
using namespace sfnmt;

namespace {

struct ModelDir {
  fs::path root;
  fs::path config() const { return root / "config.ini"; }
  fs::path src_bpe() const { return root / "bpe.src"; }
  fs::path tgt_bpe() const { return root / "bpe.tgt"; }
  fs::path char_vocab() const { return root / "chars.vocab"; }
  fs::path checkpoint() const { return root / "ckpt.bin"; }
  fs::path metrics() const { return root / "metrics.csv"; }
};

// Report config differences line by line so a wrong --config fails loudly
// with the exact offending keys.
void check_config_matches(const FullConfig& from_ckpt, const FullConfig& supplied,
                          const std::string& supplied_path) {
  std::ostringstream a, b;
  write_config(from_ckpt, a);
  write_config(supplied, b);
  if (a.str() == b.str()) return;
  std::istringstream sa(a.str()), sb(b.str());
  std::string la, lb, diffs;
  while (std::getline(sa, la)) {
    std::getline(sb, lb);
    if (la != lb) diffs += "  checkpoint: " + la + "\n  supplied:   " + lb + "\n";
  }
  throw ConfigError("config " + supplied_path +
                    " does not match the checkpoint:\n" + diffs);
}

struct LoadedModel {
  Model<float> model;
  BpeModel src_bpe, tgt_bpe;
  Vocab chars;
};

LoadedModel load_model_dir(const ModelDir& dir) {
  LoadedModel lm;
  auto ck = load_checkpoint<float>(dir.checkpoint().string());
  lm.model = std::move(ck.model);
  lm.src_bpe = load_bpe(dir.src_bpe().string());
  lm.tgt_bpe = load_bpe(dir.tgt_bpe().string());
  lm.chars = load_vocab(dir.char_vocab().string());
  if (lm.model.cfg.vocab_subword != lm.src_bpe.vocab.size() ||
      lm.model.cfg.vocab_char != lm.chars.size() ||
      lm.model.cfg.vocab_target != lm.tgt_bpe.vocab.size())
    throw ConfigError("vocabulary files in " + dir.root.string() +
                      " do not match the checkpoint's vocab sizes");
  return lm;
}

std::vector<std::string> translate_line(LoadedModel& lm,
                                        const std::vector<std::string>& words,
                                        const BeamConfig& beam) {
  if (words.empty()) return {};
  auto f = make_features(segment(words, lm.src_bpe, lm.chars), lm.model.cfg);
  auto hyps = beam_translate(lm.model, f, beam);
  if (hyps.empty()) return {};
  return detokenize_subwords(hyps[0].tokens, lm.tgt_bpe.vocab);
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) out += (i ? " " : "") + words[i];
  return out;
}

int cmd_train(const std::string& src_path, const std::string& tgt_path,
              const std::string& out_dir, const std::string& config_path,
              std::uint64_t seed_override, bool has_seed, std::size_t steps_override,
              bool resume, bool quiet) {
  ModelDir dir{out_dir};
  fs::create_directories(dir.root);

  Model<float> model;
  OptimState opt;
  FullConfig cfg;
  BpeModel src_bpe, tgt_bpe;
  Vocab chars;

  if (resume) {
    auto ck = load_checkpoint<float>(dir.checkpoint().string());
    model = std::move(ck.model);
    cfg.model = model.cfg;
    cfg.training = ck.train;
    opt = std::move(ck.opt);
    if (!config_path.empty())
      check_config_matches(cfg, load_config(config_path), config_path);
    src_bpe = load_bpe(dir.src_bpe().string());
    tgt_bpe = load_bpe(dir.tgt_bpe().string());
    chars = load_vocab(dir.char_vocab().string());
  } else {
    if (!config_path.empty()) cfg = load_config(config_path);
    if (has_seed) cfg.training.seed = seed_override;
    auto src_lines = read_token_lines(src_path);
    auto tgt_lines = read_token_lines(tgt_path);
    src_bpe = learn_bpe(src_lines, cfg.training.bpe_merges);
    tgt_bpe = learn_bpe(tgt_lines, cfg.training.bpe_merges);
    chars = build_char_vocab(src_lines);
    cfg.model.vocab_subword = src_bpe.vocab.size();
    cfg.model.vocab_char = chars.size();
    cfg.model.vocab_target = tgt_bpe.vocab.size();
    cfg.model.validate();
    save_bpe(src_bpe, dir.src_bpe().string());
    save_bpe(tgt_bpe, dir.tgt_bpe().string());
    save_vocab(chars, dir.char_vocab().string());
    std::ofstream cfg_out(dir.config());
    write_config(cfg, cfg_out);
    Rng init_rng(cfg.training.seed, 0xC0FFEE);
    model = Model<float>::init(cfg.model, init_rng);
    opt = OptimState::init(model.params);
  }
  if (steps_override) cfg.training.max_steps = steps_override;

  auto src_lines = read_token_lines(src_path);
  auto tgt_lines = read_token_lines(tgt_path);
  auto examples = prepare_examples(src_lines, tgt_lines, src_bpe, chars, tgt_bpe);

  std::ofstream metrics(dir.metrics(), resume ? std::ios::app : std::ios::out);
  if (!resume) write_metrics_header(metrics);

  run_training(model, examples, cfg.training, opt, [&](const StepStats& s) {
    write_metrics_row(metrics, s);
    if (!quiet && (s.step % 50 == 0 || s.step == 1))
      std::cout << "step " << s.step << " loss " << s.loss << " lr " << s.lr << "\n";
    if (s.step % cfg.training.checkpoint_every == 0)
      save_checkpoint(dir.checkpoint().string(), model, cfg.training, opt,
                      Rng(cfg.training.seed));
  }, &std::cerr);
  save_checkpoint(dir.checkpoint().string(), model, cfg.training, opt,
                  Rng(cfg.training.seed));
  if (!quiet) std::cout << "trained " << opt.step << " steps -> " << out_dir << "\n";
  return 0;
}

int cmd_translate(const std::string& model_dir, const std::string& input_path,
                  const std::string& out_path, const BeamConfig& beam) {
  auto lm = load_model_dir(ModelDir{model_dir});
  auto lines = read_token_lines(input_path);
  std::ofstream file_out;
  if (!out_path.empty()) {
    file_out.open(out_path);
    if (!file_out) throw InputError("cannot open for write: " + out_path);
  }
  std::ostream& out = out_path.empty() ? std::cout : file_out;
  for (const auto& words : lines) out << join(translate_line(lm, words, beam)) << "\n";
  return 0;
}

int cmd_eval(const std::string& model_dir, const std::string& src_path,
             const std::string& ref_path, const BeamConfig& beam) {
  auto lm = load_model_dir(ModelDir{model_dir});
  auto src_lines = read_token_lines(src_path);
  auto refs = read_token_lines(ref_path);
  if (src_lines.size() != refs.size())
    throw InputError("source/reference line count mismatch");
  std::vector<std::vector<std::string>> hyps;
  for (const auto& words : src_lines) hyps.push_back(translate_line(lm, words, beam));
  double bleu = corpus_bleu(refs, hyps);
  std::cout.precision(4);
  std::cout << "sentences: " << refs.size() << "\n";
  std::cout << "BLEU: " << bleu << "\n";
  return 0;
}

int cmd_stats(const std::string& src_path, std::size_t merges) {
  auto lines = read_token_lines(src_path);
  auto bpe = learn_bpe(lines, merges);
  auto stats = word_length_stats(lines, bpe);
  std::cout << "words: " << stats.total_words << "\n";
  std::cout << "fraction_over_5_chars: " << stats.fraction_over_5_chars << "\n";
  std::cout << "chars_per_word:\n";
  for (const auto& [len, count] : stats.char_lengths)
    std::cout << "  " << len << ": " << count << "\n";
  std::cout << "subwords_per_word (" << merges << " merges):\n";
  for (const auto& [len, count] : stats.subword_lengths)
    std::cout << "  " << len << ": " << count << "\n";
  return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
  std::vector<std::vector<std::string>> corpus{{"good", "-", "news"},
                                               {"the", "cat", "sat"}};
  auto bpe = learn_bpe(corpus, 6);
  auto chars = build_char_vocab(corpus);
  ModelConfig cfg;
  cfg.hidden_slow = 16;
  cfg.hidden_fast = 8;
  cfg.heads_slow = 2;
  cfg.heads_fast = 2;
  cfg.layers = 2;
  cfg.decoder_layers = 2;
  cfg.vocab_subword = bpe.vocab.size();
  cfg.vocab_char = chars.size();
  cfg.vocab_target = bpe.vocab.size();
  cfg.dropout_residual = cfg.dropout_attention = cfg.dropout_activation = 0.0;

  Rng init(seed);
  auto m = Model<double>::init(cfg, init);
  auto f = make_features(segment(corpus[0], bpe, chars), cfg);
  std::vector<int> tgt_in{Vocab::kBos};
  for (int id : f.slow_ids) tgt_in.push_back(id);
  std::vector<int> tgt_out(tgt_in.begin() + 1, tgt_in.end());
  tgt_out.push_back(Vocab::kEos);
  std::vector<std::uint8_t> tv(tgt_in.size(), 1);

  std::vector<Tensor<double>> leaves;
  for (const auto& name : m.params.names) leaves.push_back(m.params.at(name));
  auto loss_fn = [&]() {
    Rng r(0);
    auto enc = encode(m, f, r, false);
    auto mem = encdec_interaction(m, enc, f);
    auto logits = decode_forward(m, tgt_in, tv, mem, r, false);
    return cross_entropy_label_smoothed(logits, tgt_out, Vocab::kPad, 0.1);
  };
  GradCheckOptions opt;
  opt.max_coords_per_leaf = 4;
  double err = grad_check(loss_fn, leaves, opt);
  std::cout << "parameters: " << m.params.size() << "\n";
  std::cout << "max_rel_error: " << err << "\n";
  bool ok = err < 1e-4;
  std::cout << (ok ? "PASS" : "FAIL") << " (tolerance 1e-4)\n";
  return ok ? 0 : 1;
}

int cmd_flops(const std::string& config_path, std::size_t ls, std::size_t lf,
              std::size_t t, bool verify) {
  FullConfig cfg;
  if (!config_path.empty()) cfg = load_config(config_path);
  if (cfg.model.vocab_subword == 0) cfg.model.vocab_subword = 64;
  if (cfg.model.vocab_char == 0) cfg.model.vocab_char = 32;
  if (cfg.model.vocab_target == 0) cfg.model.vocab_target = 64;

  auto est = flops_forward(cfg.model, ls, lf, t);
  std::cout << "forward matrix-multiply FLOPs for lengths slow=" << ls
            << " fast=" << lf << " target=" << t << ":\n";
  print_flops(std::cout, est);

  if (verify) {
    // synthetic sentence with the requested lengths, one position per word
    const std::size_t n_groups = std::max(ls, lf);
    SentenceFeatures f;
    f.n_word_groups = n_groups;
    for (std::size_t i = 0; i < ls; ++i) {
      f.slow_ids.push_back(4 + static_cast<int>(i % (cfg.model.vocab_subword - 4)));
      f.slow_valid.push_back(1);
      f.slow_word.push_back(static_cast<int>(i % n_groups));
    }
    for (std::size_t i = 0; i < lf; ++i) {
      f.fast_ids.push_back(4 + static_cast<int>(i % (cfg.model.fast_vocab() - 4)));
      f.fast_valid.push_back(1);
      f.fast_word.push_back(static_cast<int>(i % n_groups));
    }
    f.adj_slow = detail::adjacency_from_word_map(f.slow_word).normalized;
    f.adj_fast = detail::adjacency_from_word_map(f.fast_word).normalized;
    if (cfg.model.relpos_mode != RelposMode::None) {
      auto rp = cfg.model.relpos_mode == RelposMode::Boundary
                    ? boundary_relative_indices(f.fast_word, cfg.model.relpos_window)
                    : vanilla_relative_indices(lf, cfg.model.relpos_window);
      f.relpos_rows.resize(lf * lf);
      for (std::size_t i = 0; i < lf; ++i)
        for (std::size_t j = 0; j < lf; ++j)
          f.relpos_rows[i * lf + j] = rp.table_row(i, j);
    }
    Rng init(1);
    auto m = Model<float>::init(cfg.model, init);
    std::vector<int> tgt_in(t, Vocab::kBos);
    std::vector<std::uint8_t> tv(t, 1);
    Rng r(0);
    matmul_flop_counter() = 0;
    auto enc = encode(m, f, r, false);
    auto mem = encdec_interaction(m, enc, f);
    decode_forward(m, tgt_in, tv, mem, r, false);
    std::uint64_t measured = matmul_flop_counter();
    std::cout << "instrumented: " << measured << "\n";
    std::cout << (measured == est.total() ? "exact match\n" : "MISMATCH\n");
    return measured == est.total() ? 0 : 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-branch subword/character translation model"};
  app.require_subcommand(1);

  // train
  std::string src_path, tgt_path, out_dir = "model", config_path, input_path;
  std::string ref_path, out_path, model_dir;
  std::uint64_t seed = 0;
  std::size_t max_steps = 0, merges = 100, ls = 12, lf = 24, tlen = 12;
  bool resume = false, quiet = false, verify = false;
  BeamConfig beam;

  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--src", src_path, "tokenized source corpus")->required();
  train->add_option("--tgt", tgt_path, "tokenized target corpus")->required();
  train->add_option("--out", out_dir, "model output directory");
  train->add_option("--config", config_path, "config file");
  auto* seed_opt = train->add_option("--seed", seed, "training seed override");
  train->add_option("--max-steps", max_steps, "override max_steps");
  train->add_flag("--resume", resume, "continue from the checkpoint in --out");
  train->add_flag("--quiet", quiet, "suppress progress output");

  auto* translate = app.add_subcommand("translate", "translate a file");
  translate->add_option("--model", model_dir, "model directory")->required();
  translate->add_option("--input", input_path, "tokenized input file")->required();
  translate->add_option("--out", out_path, "output file (default stdout)");
  translate->add_option("--beam", beam.beam_size, "beam size");
  translate->add_option("--lenpen", beam.length_penalty, "length penalty alpha");
  translate->add_option("--max-len", beam.max_len, "maximum output length");

  auto* eval = app.add_subcommand("eval", "translate and score BLEU");
  eval->add_option("--model", model_dir, "model directory")->required();
  eval->add_option("--src", src_path, "tokenized source file")->required();
  eval->add_option("--ref", ref_path, "tokenized reference file")->required();
  eval->add_option("--beam", beam.beam_size, "beam size");
  eval->add_option("--lenpen", beam.length_penalty, "length penalty alpha");
  eval->add_option("--max-len", beam.max_len, "maximum output length");

  auto* stats = app.add_subcommand("stats", "corpus word-length statistics");
  stats->add_option("--src", src_path, "tokenized corpus file")->required();
  stats->add_option("--bpe-merges", merges, "merges for the subword histogram");

  auto* gradcheck = app.add_subcommand("gradcheck",
                                       "finite-difference check of the full model");
  gradcheck->add_option("--seed", seed, "parameter init seed");

  auto* flops = app.add_subcommand("flops", "analytic forward FLOPs breakdown");
  flops->add_option("--config", config_path, "config file");
  flops->add_option("--slow-len", ls, "subword positions");
  flops->add_option("--fast-len", lf, "fast-branch positions");
  flops->add_option("--tgt-len", tlen, "target positions");
  flops->add_flag("--verify", verify, "also run an instrumented forward pass");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed())
      return cmd_train(src_path, tgt_path, out_dir, config_path, seed,
                       seed_opt->count() > 0, max_steps, resume, quiet);
    if (translate->parsed()) return cmd_translate(model_dir, input_path, out_path, beam);
    if (eval->parsed()) return cmd_eval(model_dir, src_path, ref_path, beam);
    if (stats->parsed()) return cmd_stats(src_path, merges);
    if (gradcheck->parsed()) return cmd_gradcheck(seed ? seed : 5);
    if (flops->parsed()) return cmd_flops(config_path, ls, lf, tlen, verify);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
