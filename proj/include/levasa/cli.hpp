#pragma once

// Subcommand front end. run() never lets an exception escape: usage errors
// return 2, runtime errors return 1. Diagnostics go to stderr; every artifact
// is written below --out.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "levasa/circumplex.hpp"
#include "levasa/csv.hpp"
#include "levasa/error.hpp"
#include "levasa/evalkit.hpp"
#include "levasa/gradcheck.hpp"
#include "levasa/synthface.hpp"
#include "levasa/train.hpp"
#include "levasa/vae.hpp"

namespace levasa::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

struct Globals {
  std::uint64_t seed = 0;
  fs::path out = ".";
  bool quiet = false;
};

struct Streams {
  std::ostream& out = std::cout;
  std::ostream& err = std::cerr;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

namespace detail {

// Emotion names across several manifests, sorted, so that label indices agree
// between splits read separately.
inline std::vector<std::string> label_union(const std::vector<fs::path>& manifests) {
  std::vector<std::string> names;
  for (const auto& m : manifests) {
    const auto t = csv::read(m);
    if (auto ce = t.find("emotion")) {
      for (const auto& row : t.rows)
        if (!row[*ce].empty()) names.push_back(row[*ce]);
    }
  }
  std::sort(names.begin(), names.end());
  names.erase(std::unique(names.begin(), names.end()), names.end());
  return names;
}

inline std::vector<std::vector<AnnotatedSample>> load_sets(const std::vector<fs::path>& manifests) {
  const auto names = label_union(manifests);
  std::vector<std::vector<AnnotatedSample>> sets;
  for (const auto& m : manifests) sets.push_back(read_manifest(m, names));
  return sets;
}

inline VADomain domain_from(const std::vector<double>& d) {
  if (d.size() != 4) throw UsageError("--domain takes four values: llim_v ulim_v llim_a ulim_a");
  VADomain dom{d[0], d[1], d[2], d[3]};
  dom.validate();
  return dom;
}

inline void write_trace(const fs::path& path, const std::vector<LossComponents>& trace) {
  auto out = csv::open_out(path);
  out << "epoch,reconstruction,kl,alignment,total\n";
  for (std::size_t e = 0; e < trace.size(); ++e) {
    out << e + 1 << ',' << csv::fmt(trace[e].reconstruction) << ',' << csv::fmt(trace[e].kl) << ','
        << csv::fmt(trace[e].alignment) << ',' << csv::fmt(trace[e].total) << '\n';
  }
}

inline void write_selection(const fs::path& path, const VanillaSelection& sel) {
  auto out = csv::open_out(path);
  out << "chunk,val_mse_v,val_mse_a,role\n";
  for (const auto& s : sel.scores) {
    const char* role = s.chunk == sel.v_chunk ? "v" : s.chunk == sel.a_chunk ? "a" : "z";
    out << static_cast<std::size_t>(s.chunk) << ',' << csv::fmt(s.val_mse_v) << ',' << csv::fmt(s.val_mse_a) << ','
        << role << '\n';
  }
}

struct TrainFlags {
  std::string model = "levasa";
  std::string annotations = "continuous";
  std::size_t d_v = 8, d_a = 8, d_z = 16;
  std::size_t epochs = 30, batch_size = 64;
  double lr = 1e-3, lambda_kl = 1.0, lambda_c = 10.0;

  void add_to(CLI::App* sub, bool with_model) {
    if (with_model) {
      sub->add_option("--model", model, "Model kind")->check(CLI::IsMember({"vanilla", "levasa"}))->capture_default_str();
    }
    sub->add_option("--annotations", annotations, "VA annotation mode")
        ->check(CLI::IsMember({"continuous", "discrete"}))
        ->capture_default_str();
    sub->add_option("--d-v", d_v, "Width of the valence chunk")->check(CLI::PositiveNumber)->capture_default_str();
    sub->add_option("--d-a", d_a, "Width of the arousal chunk")->check(CLI::PositiveNumber)->capture_default_str();
    sub->add_option("--d-z", d_z, "Width of the residual chunk")->check(CLI::PositiveNumber)->capture_default_str();
    sub->add_option("--epochs", epochs, "Training epochs")->check(CLI::PositiveNumber)->capture_default_str();
    sub->add_option("--batch-size", batch_size, "Minibatch size")->check(CLI::PositiveNumber)->capture_default_str();
    sub->add_option("--lr", lr, "Adam learning rate")->check(CLI::NonNegativeNumber)->capture_default_str();
    sub->add_option("--lambda-kl", lambda_kl, "KL weight")->check(CLI::NonNegativeNumber)->capture_default_str();
    sub->add_option("--lambda-c", lambda_c, "VA alignment weight")->check(CLI::NonNegativeNumber)->capture_default_str();
  }

  ModelConfig model_config(const std::vector<AnnotatedSample>& data) const {
    if (data.empty()) throw Error("training manifest holds no samples");
    ModelConfig c;
    c.kind = parse_model_kind(model);
    c.mode = parse_annotation_mode(annotations);
    c.layout = {d_v, d_a, d_z};
    c.image_height = data.front().image.height;
    c.image_width = data.front().image.width;
    c.validate();
    return c;
  }

  TrainConfig train_config(std::uint64_t seed) const {
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = batch_size;
    t.learning_rate = lr;
    t.seed = seed;
    t.weights = {lambda_kl, lambda_c};
    t.validate();
    return t;
  }
};

// Chunk selection for heads-free models; nullopt for aligned models.
inline std::optional<VanillaSelection> selection_for(const ModelParams& model, const std::string& train,
                                                     const std::string& val,
                                                     const std::vector<AnnotatedSample>* train_set,
                                                     const std::vector<AnnotatedSample>* val_set) {
  if (model.has_heads()) return std::nullopt;
  if (train.empty() || val.empty()) throw UsageError("a vanilla checkpoint needs --train and --val for chunk selection");
  return select_vanilla_chunks(model, *train_set, *val_set);
}

}  // namespace detail

inline int run(int argc, const char* const* argv, Streams io = {}) {
  CLI::App app{"Latent valence/arousal alignment toolkit", "levasa"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Seed for every random choice")->capture_default_str();
  app.add_option("--out", g.out, "Output directory")->capture_default_str();
  app.add_flag("--quiet", g.quiet, "Suppress progress messages");

  std::function<void()> action;
  auto log = [&](const std::string& msg) {
    if (!g.quiet) io.err << msg << '\n';
  };

  // fit-ellipses
  std::string reference;
  std::vector<double> domain_vals{-1.0, 1.0, -1.0, 1.0};
  {
    auto* sub = app.add_subcommand("fit-ellipses", "Fit one axis-aligned ellipse per emotion to a reference CSV");
    sub->add_option("--reference", reference, "CSV with emotion,valence,arousal columns")->required();
    sub->add_option("--domain", domain_vals, "llim_v ulim_v llim_a ulim_a")->expected(4)->capture_default_str();
    sub->callback([&] {
      action = [&] {
        const auto model = fit_reference(read_reference_csv(reference), detail::domain_from(domain_vals));
        write_ellipse_csv(g.out / "ellipses.csv", model);
        log("wrote " + (g.out / "ellipses.csv").string() + " (" + std::to_string(model.ellipses.size()) + " emotions)");
      };
    });
  }

  // transfer
  std::string ellipses_path, transfer_input, direction;
  int scale = kDiscreteScale;
  {
    auto* sub = app.add_subcommand("transfer", "Convert categorical labels to VA values or VA values to labels");
    sub->add_option("--model", ellipses_path, "Ellipse CSV written by fit-ellipses")->required();
    sub->add_option("--labels,--input", transfer_input, "Input CSV (emotion column, or valence/arousal columns)")
        ->required();
    sub->add_option("--direction", direction, "to-va or to-label")
        ->required()
        ->check(CLI::IsMember({"to-va", "to-label"}));
    sub->add_option("--domain", domain_vals, "llim_v ulim_v llim_a ulim_a")->expected(4)->capture_default_str();
    sub->add_option("--scale", scale, "Discrete VA scale")->check(CLI::PositiveNumber)->capture_default_str();
    sub->callback([&] {
      action = [&] {
        const auto model = read_ellipse_csv(ellipses_path, detail::domain_from(domain_vals));
        const auto t = csv::read(transfer_input);
        std::vector<std::string> header = t.header;
        auto col = [&](const std::string& name) {
          if (auto i = std::find(header.begin(), header.end(), name); i != header.end()) {
            return static_cast<std::size_t>(i - header.begin());
          }
          header.push_back(name);
          return header.size() - 1;
        };
        std::vector<std::vector<std::string>> rows = t.rows;
        SeededRng rng(g.seed);
        if (direction == "to-va") {
          const auto ce = t.column("emotion");
          const auto cv = col("valence"), ca = col("arousal"), cvd = col("valence_d"), cad = col("arousal_d");
          for (std::size_t r = 0; r < rows.size(); ++r) {
            rows[r].resize(header.size());
            const auto& label = model.find(rows[r][ce]);
            const auto p = sample_va(model, label.label, rng);
            const auto d = discretize_va(p, scale);
            rows[r][cv] = csv::fmt(p.v);
            rows[r][ca] = csv::fmt(p.a);
            rows[r][cvd] = std::to_string(d.v);
            rows[r][cad] = std::to_string(d.a);
          }
        } else {
          const auto cv = t.column("valence"), ca = t.column("arousal");
          const auto ce = col("emotion");
          for (std::size_t r = 0; r < rows.size(); ++r) {
            rows[r].resize(header.size());
            const VAPoint p{csv::parse_double(t.rows[r][cv], t.where(r)), csv::parse_double(t.rows[r][ca], t.where(r))};
            rows[r][ce] = nearest_emotion(model, p).name;
          }
        }
        const auto path = g.out / "transferred.csv";
        auto out = csv::open_out(path);
        auto line = [&](const std::vector<std::string>& cells) {
          for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
          out << '\n';
        };
        line(header);
        for (const auto& r : rows) line(r);
        if (!out) throw Error("failed writing " + path.string());
        log("wrote " + path.string() + " (" + std::to_string(rows.size()) + " rows)");
      };
    });
  }

  // gen-synth
  SyntheticConfig synth;
  synth.n_samples = 7000;
  std::vector<double> fractions{5.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0};
  std::string synth_ellipses;
  {
    auto* sub = app.add_subcommand("gen-synth", "Render a synthetic face dataset with train/val/test manifests");
    sub->add_option("--n-samples", synth.n_samples, "Number of images")->capture_default_str();
    sub->add_option("--size", synth.size, "Image side length")->check(CLI::Range(8, 4096))->capture_default_str();
    sub->add_option("--identities", synth.n_identities, "Number of face identities")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    sub->add_option("--noise", synth.noise_std, "Pixel noise standard deviation")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();
    sub->add_option("--split", fractions, "Train, val and test fractions")->expected(3);
    sub->add_option("--ellipses", synth_ellipses, "Ellipse CSV (defaults to the built-in six emotions)");
    sub->callback([&] {
      action = [&] {
        synth.seed = g.seed;
        synth.validate();
        const auto model = synth_ellipses.empty() ? default_emotion_model() : read_ellipse_csv(synth_ellipses);
        const auto samples = generate_dataset(synth, model);
        const auto paths = write_dataset(g.out / "manifest.csv", samples);
        const auto idx = split_indices(samples.size(), {fractions[0], fractions[1], fractions[2]}, g.seed);
        for (const auto& [name, rows] : {std::pair{"train", &idx.train}, {"val", &idx.val}, {"test", &idx.test}}) {
          std::vector<AnnotatedSample> s;
          std::vector<std::string> p;
          for (auto i : *rows) {
            s.push_back(samples[i]);
            p.push_back(paths[i]);
          }
          write_manifest(g.out / (std::string(name) + ".csv"), s, p);
        }
        write_ellipse_csv(g.out / "ellipses.csv", model);
        log("wrote " + std::to_string(samples.size()) + " images under " + g.out.string() + " (" +
            std::to_string(idx.train.size()) + "/" + std::to_string(idx.val.size()) + "/" +
            std::to_string(idx.test.size()) + " split)");
      };
    });
  }

  // train
  detail::TrainFlags tf;
  std::string data_path;
  {
    auto* sub = app.add_subcommand("train", "Train a Vanilla VAE or an aligned VAE from a manifest");
    sub->add_option("--data", data_path, "Training manifest")->required();
    tf.add_to(sub, true);
    sub->callback([&] {
      action = [&] {
        const auto data = read_manifest(data_path);
        const auto mc = tf.model_config(data);
        const auto tc = tf.train_config(g.seed);
        const auto result = train_model(data, init_params(mc, g.seed), tc, [&](std::size_t e, const LossComponents& l) {
          log("epoch " + std::to_string(e + 1) + "/" + std::to_string(tc.epochs) + " loss " + csv::fmt(l.total));
        });
        write_checkpoint(g.out / "checkpoint.lvsa", result.checkpoint);
        detail::write_trace(g.out / "trace.csv", result.trace);
        log("wrote " + (g.out / "checkpoint.lvsa").string());
      };
    });
  }

  // shared evaluation flags
  std::string ckpt_path, train_path, val_path, test_path;
  auto eval_flags = [&](CLI::App* sub, bool need_train) {
    sub->add_option("--checkpoint", ckpt_path, "Checkpoint written by train")->required();
    auto* tr = sub->add_option("--train", train_path, "Training manifest");
    if (need_train) tr->required();
    sub->add_option("--val", val_path, "Validation manifest (vanilla chunk selection)");
    sub->add_option("--test", test_path, "Test manifest")->required();
  };
  struct Loaded {
    ModelParams model;
    std::vector<AnnotatedSample> train, val, test;
    std::optional<VanillaSelection> selection;
  };
  auto load_eval = [&]() {
    Loaded l;
    l.model = read_checkpoint(ckpt_path).model;
    std::vector<fs::path> paths{test_path};
    if (!train_path.empty()) paths.push_back(train_path);
    if (!val_path.empty()) paths.push_back(val_path);
    auto sets = detail::load_sets(paths);
    l.test = std::move(sets[0]);
    std::size_t k = 1;
    if (!train_path.empty()) l.train = std::move(sets[k++]);
    if (!val_path.empty()) l.val = std::move(sets[k++]);
    l.selection = detail::selection_for(l.model, train_path, val_path, &l.train, &l.val);
    if (l.selection) detail::write_selection(g.out / "chunk_selection.csv", *l.selection);
    return l;
  };

  {
    auto* sub = app.add_subcommand("eval-align", "Latent/VA alignment errors on a test manifest");
    eval_flags(sub, false);
    sub->callback([&] {
      action = [&] {
        auto l = load_eval();
        const auto r = alignment_report(l.model, l.test, l.model.config.mode, l.selection ? &*l.selection : nullptr,
                                        l.train);
        write_alignment_csv(g.out / "alignment.csv", r);
        log("combined alignment error " + csv::fmt(r.combined_error()));
      };
    });
  }

  std::string task = "classify", combo = "va";
  {
    auto* sub = app.add_subcommand("probe", "Train probes on frozen latent codes");
    eval_flags(sub, true);
    sub->add_option("--task", task, "classify or regress")
        ->check(CLI::IsMember({"classify", "regress"}))
        ->capture_default_str();
    sub->add_option("--chunks", combo, "Chunk combination for classify: v|a|z|va|vaz")
        ->check(CLI::IsMember({"v", "a", "z", "va", "vaz"}))
        ->capture_default_str();
    sub->callback([&] {
      action = [&] {
        auto l = load_eval();
        const ChunkRoles roles = l.selection ? ChunkRoles::from(*l.selection) : ChunkRoles{};
        auto codes = encode_dataset(l.model, l.train);
        const auto test_codes = encode_dataset(l.model, l.test);
        codes.insert(codes.end(), test_codes.begin(), test_codes.end());
        std::vector<AnnotatedSample> all = l.train;
        all.insert(all.end(), l.test.begin(), l.test.end());
        ProbeSplits splits;
        for (std::size_t i = 0; i < l.train.size(); ++i) splits.train.push_back(i);
        for (std::size_t i = 0; i < l.test.size(); ++i) splits.test.push_back(l.train.size() + i);
        if (task == "classify") {
          const ProbeReport r = probe_classify(codes, emotion_targets(all), parse_chunk_combo(combo), splits, g.seed, roles);
          write_probe_csv(g.out / "probe_classify.csv", std::span<const ProbeReport>(&r, 1));
          log(to_string(r.combination) + " accuracy " + csv::fmt(r.accuracy));
        } else {
          std::vector<VAPoint> va;
          for (std::size_t i = 0; i < all.size(); ++i) {
            if (!all[i].va) throw Error("regression probe needs continuous VA on every sample");
            va.push_back(*all[i].va);
          }
          const auto r = probe_regress(codes, va, splits, g.seed, roles);
          write_regression_csv(g.out / "probe_regress.csv", r);
          log("valence R2 " + csv::fmt(r[0].r2) + ", arousal R2 " + csv::fmt(r[1].r2));
        }
      };
    });
  }

  {
    auto* sub = app.add_subcommand("plot-circumplex", "Export predicted VA points as CSV and SVG");
    eval_flags(sub, false);
    sub->callback([&] {
      action = [&] {
        auto l = load_eval();
        const auto rows = circumplex_rows(l.model, l.test, l.selection ? &*l.selection : nullptr);
        write_circumplex_csv(g.out / "circumplex.csv", rows);
        write_circumplex_svg(g.out / "circumplex.svg", rows);
        log("wrote " + std::to_string(rows.size()) + " points");
      };
    });
  }

  detail::TrainFlags sweep_flags;
  std::vector<double> lambdas{0.0, 0.1, 1.0, 10.0};
  {
    auto* sub = app.add_subcommand("rd-sweep", "Reconstruction versus alignment over lambda_c");
    sub->add_option("--train", train_path, "Training manifest")->required();
    sub->add_option("--test", test_path, "Test manifest")->required();
    sub->add_option("--lambdas", lambdas, "lambda_c values (at least two)")->capture_default_str();
    sweep_flags.add_to(sub, false);
    sub->callback([&] {
      if (lambdas.size() < 2) throw CLI::ValidationError("--lambdas", "needs at least two values");
      action = [&] {
        auto sets = detail::load_sets({train_path, test_path});
        detail::TrainFlags f = sweep_flags;
        f.model = "levasa";
        const auto mc = f.model_config(sets[0]);
        const auto curve = rate_distortion_sweep(sets[0], sets[1], init_params(mc, g.seed), f.train_config(g.seed), lambdas);
        write_rate_distortion_csv(g.out / "rate_distortion.csv", curve);
        for (const auto& p : curve) {
          log("lambda_c " + csv::fmt(p.lambda_c) + ": reconstruction " + csv::fmt(p.reconstruction_error) +
              ", alignment " + csv::fmt(p.alignment_error));
        }
      };
    });
  }

  std::size_t grad_points = 20;
  int grad_exit = kExitOk;
  {
    auto* sub = app.add_subcommand("grad-check", "Compare every differentiable op against finite differences");
    sub->add_option("--points", grad_points, "Random points per op")->check(CLI::PositiveNumber)->capture_default_str();
    sub->callback([&] {
      action = [&] {
        double worst = 0.0;
        for (const auto& e : gradient_suite(g.seed, grad_points)) {
          worst = std::max(worst, e.result.max_rel_error);
          log(e.name + ": max relative error " + csv::fmt(e.result.max_rel_error));
        }
        io.err << "max relative error " << csv::fmt(worst) << '\n';
        grad_exit = worst < 1e-4 ? kExitOk : kExitRuntime;
      };
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, io.out, io.err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, io.out, io.err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, io.out, io.err);
  } catch (const CLI::ParseError& e) {
    io.err << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    io.err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  try {
    fs::create_directories(g.out);
    action();
  } catch (const UsageError& e) {
    io.err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    io.err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return grad_exit;
}

}  // namespace levasa::cli
