// SPDX-License-Identifier: Apache-2.0
//
// attnocr command-line tool. Standard output carries only the payload;
// diagnostics go to standard error.
//
// Exit codes: 0 success, 2 configuration or usage error, 3 I/O or file-format
// error, 4 numeric failure during training.
#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "attnocr/alloc.hpp"
#include "attnocr/checkpoint.hpp"
#include "attnocr/config.hpp"
#include "attnocr/dataset.hpp"
#include "attnocr/font.hpp"
#include "attnocr/image.hpp"
#include "attnocr/metrics.hpp"
#include "attnocr/trainer.hpp"

namespace {

using namespace attnocr;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

std::string charset_listing(const std::u32string& charset) {
  std::string out;
  for (char32_t c : charset) out += (out.empty() ? "" : " ") + codepoint_label(c);
  return out.empty() ? "(empty)" : out;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

OcrModel load_model(const std::string& path, Vocabulary& vocab) {
  const auto ckpt = load_checkpoint(path);
  vocab = Vocabulary(ckpt.charset);
  return restore_model(ckpt);
}

std::string format(double v) { return detail::format_double(v); }

// --- synth -----------------------------------------------------------------

struct SynthArgs {
  std::string texts, font, out, charset, split;
  std::uint64_t seed = 1;
  std::vector<std::string> augment;
};

int cmd_synth(const SynthArgs& a) {
  const auto font = GlyphFont::load(a.font);
  std::vector<AugmentSpec> specs;
  for (const auto& s : a.augment) specs.push_back(AugmentSpec::parse(s));
  if (specs.empty()) specs.push_back({});
  Vocabulary vocab;
  if (!a.charset.empty()) {
    vocab = Vocabulary::load(a.charset);
  } else {
    std::u32string chars;
    for (const auto& [cp, g] : font.glyphs) chars.push_back(cp);
    vocab = Vocabulary(chars);
  }
  const auto texts = read_lines(a.texts);
  Rng rng(a.seed);
  for (std::size_t i = 0; i < texts.size(); ++i) {
    try {
      vocab.encode(texts[i]);
    } catch (const IndexError& e) {
      throw ConfigError(a.texts + ":" + std::to_string(i + 1) + ": " + e.what());
    }
  }
  const auto m = synth_corpus(texts, font, specs, vocab, rng, a.out, a.split);
  std::cout << "wrote " << m.records.size() << " records to " << (std::filesystem::path(a.out) / "manifest.tsv").string()
            << '\n';
  return kExitOk;
}

// --- texts -----------------------------------------------------------------

struct TextsArgs {
  std::string charset;
  std::size_t count = 100, min_len = 2, max_len = 6;
  std::uint64_t seed = 1;
};

int cmd_texts(const TextsArgs& a) {
  const auto vocab = Vocabulary::load(a.charset);
  Rng rng(a.seed);
  for (const auto& t : random_texts(vocab.charset(), a.count, a.min_len, a.max_len, rng)) std::cout << t << '\n';
  return kExitOk;
}

// --- font ------------------------------------------------------------------

struct FontArgs {
  std::string charset, out;
  std::uint64_t seed = 1;
};

int cmd_font(const FontArgs& a) {
  const auto vocab = Vocabulary::load(a.charset);
  make_synthetic_font(vocab.charset(), a.seed).save(a.out);
  std::cerr << "wrote " << vocab.charset().size() << " glyphs to " << a.out << '\n';
  return kExitOk;
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<double> lr0;
};

int cmd_train(const TrainArgs& a) {
  auto rc = RunConfig::load(a.config);
  for (const auto& s : a.overrides) rc.set_assignment(s);
  if (a.seed) rc.train.seed = *a.seed;
  if (a.epochs) rc.train.epochs = *a.epochs;
  if (a.lr0) rc.train.lr0 = *a.lr0;
  rc.validate();

  const auto train_manifest = Manifest::load(rc.train_manifest);
  std::vector<TextLineSample> val;
  if (!rc.val_manifest.empty()) {
    const auto val_manifest = Manifest::load(rc.val_manifest);
    if (!(val_manifest.vocabulary == train_manifest.vocabulary)) {
      throw ConfigError("charset mismatch between manifests: train " + charset_listing(train_manifest.vocabulary.charset()) +
                        ", val " + charset_listing(val_manifest.vocabulary.charset()));
    }
    val = load_samples(val_manifest);
  }
  const auto samples = load_samples(train_manifest);
  TrainOptions opt;
  opt.output_dir = rc.output_dir;
  opt.progress = &std::cerr;
  const auto result = train(rc.train, rc.model, train_manifest.vocabulary, samples, val, opt);
  const auto& last = result.log.back();
  std::cout << "split\t" << last.split << "\nloss\t" << format(last.loss) << "\nperplexity\t" << format(last.perplexity())
            << "\ncer\t" << (last.cer ? format(*last.cer) : "-") << "\nwer\t" << (last.wer ? format(*last.wer) : "-")
            << '\n';
  return kExitOk;
}

// --- eval ------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, manifest;
};

int cmd_eval(const EvalArgs& a) {
  Vocabulary vocab;
  const auto model = load_model(a.checkpoint, vocab);
  const auto manifest = Manifest::load(a.manifest);
  if (!(manifest.vocabulary == vocab)) {
    throw ConfigError("charset mismatch: checkpoint " + charset_listing(vocab.charset()) + ", manifest " +
                      charset_listing(manifest.vocabulary.charset()));
  }
  const auto samples = load_samples(manifest);
  if (samples.empty()) throw ConfigError("manifest " + a.manifest + " has no records");
  const auto ev = evaluate(model, vocab, samples);
  std::cout << "#loss\t" << format(ev.loss) << "\t" << format(perplexity(ev.loss)) << '\n';
  write_report(std::cout, ev.pairs);
  return kExitOk;
}

// --- predict ---------------------------------------------------------------

struct PredictArgs {
  std::string checkpoint, image, heatmap;
};

/// Attention weights as an image, one row per decode step; α maps linearly onto 0..255.
GrayImage heatmap_image(const AttentionTrace& trace) {
  GrayImage img(trace.positions, trace.steps);
  for (std::size_t i = 0; i < trace.weights.size(); ++i) img.pixels[i] = to_byte(255.0 * trace.weights[i]);
  return img;
}

int cmd_predict(const PredictArgs& a) {
  Vocabulary vocab;
  const auto model = load_model(a.checkpoint, vocab);
  const auto img = scale_to_height(read_pgm(a.image), model.config().encoder.image_height);
  const auto decoded = model.greedy_decode(image_to_tensor(img));
  if (decoded.truncated) std::cerr << "warning: decoding stopped at the length limit without EOS\n";
  std::cout << vocab.decode(decoded.tokens) << '\n';
  if (!a.heatmap.empty()) {
    write_pgm(a.heatmap, heatmap_image(decoded.trace));
    std::ofstream side(a.heatmap + ".txt", std::ios::binary);
    if (!side) throw IoError("cannot write " + a.heatmap + ".txt");
    for (std::size_t i = 0; i < decoded.trace.steps; ++i) {
      const auto row = decoded.trace.row(i);
      for (std::size_t t = 0; t < row.size(); ++t) side << (t ? "\t" : "") << format(row[t]);
      side << '\n';
    }
    if (!side) throw IoError("failed writing " + a.heatmap + ".txt");
  }
  return kExitOk;
}

// --- extract ---------------------------------------------------------------

struct ExtractArgs {
  std::string checkpoint, page, out;
};

int cmd_extract(const ExtractArgs& a) {
  Vocabulary vocab;
  const auto model = load_model(a.checkpoint, vocab);
  const auto page = read_pgm(a.page);
  const auto lines = extract_lines(page);
  std::string text, boxes;
  for (const auto& line : lines) {
    text += vocab.decode(model.greedy_decode(image_to_tensor(line.image)).tokens) + "\n";
    boxes += std::to_string(line.box.x) + "\t" + std::to_string(line.box.y) + "\t" + std::to_string(line.box.w) + "\t" +
             std::to_string(line.box.h) + "\n";
  }
  write_file(a.out, text);
  write_file(a.out + ".boxes.txt", boxes);
  std::cout << text;
  std::cerr << "extracted " << lines.size() << " lines\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  attnocr::retain_freed_memory();
  CLI::App app{"Attention encoder-decoder OCR for single text lines and pages"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for all subcommands");

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Render a text list into an augmented line-image corpus");
  s->add_option("--texts", synth.texts, "Text file, one line of ground truth per line")->required();
  s->add_option("--font", synth.font, "Glyph font file")->required();
  s->add_option("--out", synth.out, "Output directory for images, charset.txt and manifest.tsv")->required();
  s->add_option("--seed", synth.seed, "Random seed");
  s->add_option("--augment", synth.augment, "Augmentation spec, repeatable: speckle=P,morph=erode|dilate,rotate=DEG or none");
  s->add_option("--charset", synth.charset, "Charset file (default: every glyph of the font)");
  s->add_option("--split", synth.split, "Split tag written to the manifest");

  TextsArgs texts;
  auto* t = app.add_subcommand("texts", "Print random strings over a charset");
  t->add_option("--charset", texts.charset, "Charset file")->required();
  t->add_option("--count", texts.count, "Number of strings");
  t->add_option("--min-len", texts.min_len, "Minimum length");
  t->add_option("--max-len", texts.max_len, "Maximum length");
  t->add_option("--seed", texts.seed, "Random seed");

  FontArgs font;
  auto* f = app.add_subcommand("font", "Generate a synthetic block-glyph font for a charset");
  f->add_option("--charset", font.charset, "Charset file")->required();
  f->add_option("--out", font.out, "Output font file")->required();
  f->add_option("--seed", font.seed, "Random seed");

  TrainArgs tr;
  auto* r = app.add_subcommand("train", "Train a model from a key=value config file");
  r->add_option("--config", tr.config, "Config file")->required();
  r->add_option("--set", tr.overrides, "Override a config key, repeatable: key=value");
  r->add_option("--seed", tr.seed, "Random seed (overrides config and --set)");
  r->add_option("--epochs", tr.epochs, "Epochs (overrides config and --set)");
  r->add_option("--lr0", tr.lr0, "Initial learning rate (overrides config and --set)");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Greedy-decode a manifest and report CER, WER, perplexity and confusions");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  e->add_option("--manifest", ev.manifest, "Manifest file")->required();

  PredictArgs pr;
  auto* p = app.add_subcommand("predict", "Recognize one line image");
  p->add_option("--checkpoint", pr.checkpoint, "Checkpoint file")->required();
  p->add_option("--image", pr.image, "Line image (PGM)")->required();
  p->add_option("--heatmap", pr.heatmap, "Write attention weights as PGM plus a .txt sidecar of raw values");

  ExtractArgs ex;
  auto* x = app.add_subcommand("extract", "Find text lines on a page and recognize each");
  x->add_option("--checkpoint", ex.checkpoint, "Checkpoint file")->required();
  x->add_option("--page", ex.page, "Page image (PGM)")->required();
  x->add_option("--out", ex.out, "Output text file; line boxes go to OUT.boxes.txt")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kExitConfig;
  }

  try {
    if (*s) return cmd_synth(synth);
    if (*t) return cmd_texts(texts);
    if (*f) return cmd_font(font);
    if (*r) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*p) return cmd_predict(pr);
    if (*x) return cmd_extract(ex);
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << '\n';
    return kExitConfig;
  } catch (const ContractError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitConfig;
  } catch (const IndexError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitConfig;
  } catch (const IoError& err) {
    std::cerr << "I/O error: " << err.what() << '\n';
    return kExitIo;
  } catch (const FormatError& err) {
    std::cerr << "format error: " << err.what() << '\n';
    return kExitIo;
  } catch (const NumericError& err) {
    std::cerr << "numeric error: " << err.what() << '\n';
    return kExitNumeric;
  }
  return kExitConfig;
}
