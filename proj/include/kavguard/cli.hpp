/*
 * Copyright 2026 The kavguard Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// The `kavguard` command line. Exit codes: 0 success, 2 usage, 3 format,
// 4 I/O.

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "kavguard/decision.hpp"
#include "kavguard/error.hpp"
#include "kavguard/eval.hpp"
#include "kavguard/geometry.hpp"
#include "kavguard/kav_store.hpp"
#include "kavguard/members.hpp"
#include "kavguard/parallel.hpp"
#include "kavguard/stats.hpp"
#include "kavguard/synth.hpp"

namespace kavguard::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitFormat = 3;
inline constexpr int kExitIo = 4;

namespace detail {

inline bool is_csv_path(const std::string& path) {
  auto ext = std::filesystem::path(path).extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".csv";
}

// Loads a KAV dataset from either form. CSV needs num_classes.
inline KavDataset load_dataset(const std::string& path, const std::string& format,
                               std::uint32_t num_classes) {
  const bool csv = format == "csv" || (format == "auto" && is_csv_path(path));
  if (!csv) return read_kav_file(path);
  if (num_classes == 0) throw UsageError("--num-classes is required for CSV input");
  auto in = open_input(path, false);
  return read_kav_csv(in, num_classes);
}

template <typename Fn>
void write_text_file(const std::string& path, Fn&& fn) {
  auto out = open_output(path);
  fn(out);
  out.close();
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline FittedModel load_stats(const std::string& path) {
  auto in = open_input(path, false);
  return read_stats_json(in);
}

inline std::vector<Verdict> load_verdicts(const std::string& path) {
  auto in = open_input(path, false);
  return read_verdicts_csv(in);
}

inline std::vector<ScoreRow> load_scores(const std::string& path) {
  auto in = open_input(path, false);
  return read_scores_csv(in);
}

}  // namespace detail

/// Runs one invocation. `args` excludes the program name.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"kavguard: class-conditional Gaussian uncertainty layer over activation vectors"};
  app.name("kavguard");
  app.require_subcommand(1);
  int verbosity = 0;
  app.add_flag("-v,--verbose", verbosity, "Print progress details to stderr");

  std::function<void()> action;

  // fit ---------------------------------------------------------------------
  struct {
    std::string input, output, format = "auto", members_out, accumulators_out;
    std::uint32_t num_classes = 0;
    std::size_t members = kDefaultMembers;
    double floor = kDefaultVarianceFloor;
  } fit_opts;
  auto* fit_cmd = app.add_subcommand("fit", "Fit per-class diagonal Gaussians in one pass");
  fit_cmd->add_option("--input", fit_opts.input, "Training KAV file (binary or .csv)")->required();
  fit_cmd->add_option("--output", fit_opts.output, "Stats JSON to write")->required();
  fit_cmd->add_option("--format", fit_opts.format, "Input format")
      ->check(CLI::IsMember({"auto", "kav", "csv"}))
      ->capture_default_str();
  fit_cmd->add_option("--num-classes", fit_opts.num_classes, "Class count for CSV input");
  fit_cmd->add_option("--members", fit_opts.members, "Members kept per class (M)")
      ->capture_default_str();
  fit_cmd->add_option("--members-out", fit_opts.members_out, "Member store JSON to write");
  fit_cmd->add_option("--variance-floor", fit_opts.floor, "Minimum per-dimension variance")
      ->capture_default_str();
  fit_cmd->add_option("--accumulators-out", fit_opts.accumulators_out,
                      "Raw moment sums JSON for merge-stats");
  fit_cmd->callback([&] {
    action = [&] {
      const std::size_t threads = default_threads();
      const bool csv = fit_opts.format == "csv" ||
                       (fit_opts.format == "auto" && detail::is_csv_path(fit_opts.input));
      AccumulatorSet acc(1);
      if (csv) {
        acc = accumulate_dataset(
            detail::load_dataset(fit_opts.input, "csv", fit_opts.num_classes), threads);
      } else {
        auto in = open_input(fit_opts.input);
        KavReader reader(in);
        acc = accumulate_stream(reader, threads);
      }
      const auto model = acc.finalize(fit_opts.floor);
      detail::write_text_file(fit_opts.output, [&](std::ostream& o) { write_stats_json(model, o); });
      if (!fit_opts.accumulators_out.empty()) {
        detail::write_text_file(fit_opts.accumulators_out,
                                [&](std::ostream& o) { write_accumulators_json(acc, o); });
      }
      if (!fit_opts.members_out.empty()) {
        MemberStore store;
        if (csv) {
          store = build_member_store(
              detail::load_dataset(fit_opts.input, "csv", fit_opts.num_classes), model,
              fit_opts.members, fit_opts.input);
        } else {
          auto in = open_input(fit_opts.input);
          KavReader reader(in);
          store = build_member_store(reader, model, fit_opts.members, fit_opts.input);
        }
        detail::write_text_file(fit_opts.members_out,
                                [&](std::ostream& o) { write_members_json(store, o); });
      }
      std::uint64_t n = 0;
      for (const auto& [id, s] : model.classes) n += s.count;
      out << "fit " << model.classes.size() << " classes, " << n << " records, dim "
          << model.dim << '\n';
    };
  });

  // merge-stats -------------------------------------------------------------
  struct {
    std::vector<std::string> inputs;
    std::string output;
    double floor = kDefaultVarianceFloor;
  } merge_opts;
  auto* merge_cmd =
      app.add_subcommand("merge-stats", "Merge accumulator files from sharded fits, in order");
  merge_cmd->add_option("--inputs", merge_opts.inputs, "Accumulator JSON files")->required();
  merge_cmd->add_option("--output", merge_opts.output, "Stats JSON to write")->required();
  merge_cmd->add_option("--variance-floor", merge_opts.floor, "Minimum per-dimension variance")
      ->capture_default_str();
  merge_cmd->callback([&] {
    action = [&] {
      std::optional<AccumulatorSet> total;
      for (const auto& path : merge_opts.inputs) {
        auto in = open_input(path, false);
        auto part = read_accumulators_json(in);
        if (!total) {
          total = AccumulatorSet(part.dim());
        }
        total->merge(part);
      }
      const auto model = total->finalize(merge_opts.floor);
      detail::write_text_file(merge_opts.output,
                              [&](std::ostream& o) { write_stats_json(model, o); });
      out << "merged " << merge_opts.inputs.size() << " shards into " << model.classes.size()
          << " classes\n";
    };
  });

  // decide ------------------------------------------------------------------
  struct {
    std::string stats, input, output, format = "auto", orientation = "below", top2 = "auto";
    std::string scores_out, score_kind = "confidence";
    std::uint32_t num_classes = 0;
    double k_percent = kDefaultKPercent;
    std::size_t df = 0;
    int score_label = 1;
  } dec_opts;
  auto* dec_cmd = app.add_subcommand("decide", "Label each vector certain, uncertain or outlier");
  dec_cmd->add_option("--stats", dec_opts.stats, "Stats JSON from fit")->required();
  dec_cmd->add_option("--input", dec_opts.input, "Test KAV file (binary or .csv)")->required();
  dec_cmd->add_option("--output", dec_opts.output, "Verdict CSV to write")->required();
  dec_cmd->add_option("--format", dec_opts.format, "Input format")
      ->check(CLI::IsMember({"auto", "kav", "csv"}))
      ->capture_default_str();
  dec_cmd->add_option("--num-classes", dec_opts.num_classes, "Class count for CSV input");
  dec_cmd->add_option("--k-percent", dec_opts.k_percent, "Closeness fraction for uncertain")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  dec_cmd->add_option("--orientation", dec_opts.orientation,
                      "Outlier side of the threshold: below (d^2 <= t) or above (d^2 > t)")
      ->check(CLI::IsMember({"below", "above"}))
      ->capture_default_str();
  dec_cmd->add_option("--top2", dec_opts.top2,
                      "Candidate selection: logits, distance, or auto (logits when present)")
      ->check(CLI::IsMember({"auto", "logits", "distance"}))
      ->capture_default_str();
  dec_cmd->add_option("--df", dec_opts.df, "Degrees of freedom (default: model dim)");
  dec_cmd->add_option("--scores-out", dec_opts.scores_out, "Also write a score CSV");
  dec_cmd->add_option("--score-label", dec_opts.score_label, "Label column of the score CSV")
      ->check(CLI::IsMember({0, 1}))
      ->capture_default_str();
  dec_cmd->add_option("--score-kind", dec_opts.score_kind,
                      "confidence (-d1) or softmax (max softmax of logits)")
      ->check(CLI::IsMember({"confidence", "softmax"}))
      ->capture_default_str();
  dec_cmd->callback([&] {
    action = [&] {
      const auto model = detail::load_stats(dec_opts.stats);
      const auto data = detail::load_dataset(dec_opts.input, dec_opts.format, dec_opts.num_classes);
      DecisionConfig cfg;
      cfg.k_percent = dec_opts.k_percent;
      cfg.orientation =
          dec_opts.orientation == "above" ? Orientation::ProseAbove : Orientation::AsWrittenBelow;
      if (dec_opts.top2 == "logits") cfg.top2_source = Top2Source::Logits;
      if (dec_opts.top2 == "distance") cfg.top2_source = Top2Source::MinDistance;
      if (dec_opts.df != 0) cfg.df = dec_opts.df;
      const auto verdicts = decide_batch(data, model, cfg, default_threads());
      detail::write_text_file(dec_opts.output,
                              [&](std::ostream& o) { write_verdicts_csv(verdicts, o); });
      if (!dec_opts.scores_out.empty()) {
        std::vector<ScoreRow> rows;
        rows.reserve(verdicts.size());
        for (std::size_t i = 0; i < verdicts.size(); ++i) {
          double score = verdicts[i].confidence;
          if (dec_opts.score_kind == "softmax") {
            if (!data[i].logits) {
              throw UsageError("--score-kind softmax needs logits (record " + std::to_string(i) +
                               ")");
            }
            score = softmax_confidence(*data[i].logits);
          }
          rows.push_back({verdicts[i].record_index, score, dec_opts.score_label});
        }
        detail::write_text_file(dec_opts.scores_out,
                                [&](std::ostream& o) { write_scores_csv(rows, o); });
      }
      const auto c = count_categories(verdicts);
      out << "certain=" << c.certain << " uncertain=" << c.uncertain << " outlier=" << c.outlier
          << " total=" << c.total() << '\n';
    };
  });

  // overlap -----------------------------------------------------------------
  struct {
    std::string stats, output;
  } ov_opts;
  auto* ov_cmd = app.add_subcommand("overlap", "Pairwise Bhattacharyya distances between classes");
  ov_cmd->add_option("--stats", ov_opts.stats, "Stats JSON from fit")->required();
  ov_cmd->add_option("--output", ov_opts.output, "Matrix CSV to write")->required();
  ov_cmd->callback([&] {
    action = [&] {
      const auto matrix = overlap_matrix(detail::load_stats(ov_opts.stats));
      detail::write_text_file(ov_opts.output,
                              [&](std::ostream& o) { write_overlap_csv(matrix, o); });
      out << "overlap " << matrix.size() << "x" << matrix.size() << '\n';
    };
  });

  // eval --------------------------------------------------------------------
  auto* eval_cmd = app.add_subcommand("eval", "Detection metrics");
  eval_cmd->require_subcommand(1);

  struct {
    std::string pos, neg, output, curve_out;
  } roc_opts;
  auto* roc_cmd = eval_cmd->add_subcommand("auroc", "AUROC of positive vs negative score files");
  roc_cmd->add_option("--pos", roc_opts.pos, "Positive score CSV")->required();
  roc_cmd->add_option("--neg", roc_opts.neg, "Negative score CSV")->required();
  roc_cmd->add_option("--output", roc_opts.output, "Report JSON to write");
  roc_cmd->add_option("--curve-out", roc_opts.curve_out, "Curve CSV to write");
  roc_cmd->callback([&] {
    action = [&] {
      const auto pos = score_values(detail::load_scores(roc_opts.pos));
      const auto neg = score_values(detail::load_scores(roc_opts.neg));
      const auto roc = auroc(pos, neg);
      if (!roc_opts.output.empty()) {
        detail::write_text_file(roc_opts.output, [&](std::ostream& o) { write_roc_json(roc, o); });
      }
      if (!roc_opts.curve_out.empty()) {
        detail::write_text_file(roc_opts.curve_out,
                                [&](std::ostream& o) { write_roc_csv(roc, o); });
      }
      out << "auroc=" << format_real(roc.auroc) << '\n';
    };
  });

  std::string rate_verdicts;
  auto* rate_cmd = eval_cmd->add_subcommand("rate", "Fraction of verdicts labelled outlier");
  rate_cmd->add_option("--verdicts", rate_verdicts, "Verdict CSV")->required();
  rate_cmd->callback([&] {
    action = [&] {
      const auto verdicts = detail::load_verdicts(rate_verdicts);
      out << "outlier_rate=" << format_real(outlier_rate(verdicts)) << '\n';
    };
  });

  struct {
    std::string verdicts, truth, format = "auto";
    std::uint32_t num_classes = 0;
  } acc_opts;
  auto* acc_cmd = eval_cmd->add_subcommand("accuracy", "Top-1 accuracy against dataset labels");
  acc_cmd->add_option("--verdicts", acc_opts.verdicts, "Verdict CSV")->required();
  acc_cmd->add_option("--truth", acc_opts.truth, "Labelled KAV file the verdicts came from")
      ->required();
  acc_cmd->add_option("--format", acc_opts.format, "Truth file format")
      ->check(CLI::IsMember({"auto", "kav", "csv"}));
  acc_cmd->add_option("--num-classes", acc_opts.num_classes, "Class count for CSV truth");
  acc_cmd->callback([&] {
    action = [&] {
      const auto verdicts = detail::load_verdicts(acc_opts.verdicts);
      const auto data = detail::load_dataset(acc_opts.truth, acc_opts.format, acc_opts.num_classes);
      std::vector<ClassId> truth;
      truth.reserve(verdicts.size());
      for (const auto& v : verdicts) {
        if (v.record_index >= data.size()) {
          throw UsageError("verdict for record " + std::to_string(v.record_index) +
                           " has no matching truth record");
        }
        truth.push_back(data[v.record_index].label);
      }
      const auto r = accuracy(verdicts, truth);
      out << "overall=" << format_real(r.overall)
          << " certain_only=" << (r.certain > 0 ? format_real(r.certain_only) : "nan")
          << " abstain_rate=" << format_real(r.abstain_rate) << '\n';
    };
  });

  struct {
    std::vector<std::string> levels;
    std::string neg, output;
  } sweep_opts;
  auto* sweep_cmd = eval_cmd->add_subcommand(
      "sweep", "Mean confidence and AUROC per noise level (LEVEL=verdicts.csv ...)");
  sweep_cmd->add_option("--levels", sweep_opts.levels, "noise_level=verdict CSV pairs")
      ->required();
  sweep_cmd->add_option("--neg", sweep_opts.neg, "Negative score CSV shared by every level");
  sweep_cmd->add_option("--output", sweep_opts.output, "Sweep CSV to write")->required();
  sweep_cmd->callback([&] {
    action = [&] {
      std::map<double, std::vector<Verdict>> per_level;
      for (const auto& entry : sweep_opts.levels) {
        const auto eq = entry.find('=');
        const auto level = eq == std::string::npos ? std::nullopt : parse_real(entry.substr(0, eq));
        if (!level) throw UsageError("--levels entries must look like 0.1=verdicts.csv: " + entry);
        if (!per_level.emplace(*level, detail::load_verdicts(entry.substr(eq + 1))).second) {
          throw UsageError("duplicate noise level " + entry.substr(0, eq));
        }
      }
      std::vector<double> neg;
      if (!sweep_opts.neg.empty()) neg = score_values(detail::load_scores(sweep_opts.neg));
      const auto report = sweep_report(per_level, neg);
      detail::write_text_file(sweep_opts.output,
                              [&](std::ostream& o) { write_sweep_csv(report, o); });
      out << "sweep " << report.levels.size() << " levels\n";
    };
  });

  // members -----------------------------------------------------------------
  struct {
    std::string store;
    ClassId class_id = 0;
    std::size_t m = 1;
  } mem_opts;
  auto* mem_cmd = app.add_subcommand("members", "Nearest stored training records of a class");
  mem_cmd->add_option("--members", mem_opts.store, "Member store JSON from fit")->required();
  mem_cmd->add_option("--class", mem_opts.class_id, "Class id")->required();
  mem_cmd->add_option("-m", mem_opts.m, "How many to list")->required();
  mem_cmd->callback([&] {
    action = [&] {
      auto in = open_input(mem_opts.store, false);
      const auto store = read_members_json(in);
      for (auto idx : retrieve_members(store, mem_opts.class_id, mem_opts.m)) out << idx << '\n';
    };
  });

  // synth -------------------------------------------------------------------
  SynthConfig synth;
  std::uint64_t sample_seed = 0;
  bool sample_seed_set = false;
  std::string synth_out;
  auto* synth_cmd = app.add_subcommand("synth", "Write a seeded synthetic Gaussian KAV file");
  synth_cmd->add_option("--classes", synth.num_classes, "Class count")->capture_default_str();
  synth_cmd->add_option("--dim", synth.dim, "Vector dimension")->capture_default_str();
  synth_cmd->add_option("--per-class", synth.per_class, "Records per class")->capture_default_str();
  synth_cmd->add_option("--mean-scale", synth.mean_scale, "Spread of class means")
      ->capture_default_str();
  synth_cmd->add_option("--noise", synth.noise_sigma, "Extra Gaussian corruption, in stddevs")
      ->capture_default_str();
  synth_cmd->add_flag("--logits", synth.with_logits, "Include class log-likelihoods as logits");
  synth_cmd->add_flag("--unlabeled", synth.unlabeled, "Write every label as -1");
  synth_cmd->add_option("--seed", synth.seed, "Seed of the class parameters")
      ->capture_default_str();
  synth_cmd
      ->add_option("--sample-seed", sample_seed, "Seed of the samples (default: --seed)")
      ->each([&](const std::string&) { sample_seed_set = true; });
  synth_cmd->add_option("--output", synth_out, "KAV file to write")->required();
  synth_cmd->callback([&] {
    action = [&] {
      const auto ds = synth_dataset(synth, sample_seed_set ? sample_seed : synth.seed);
      const auto bytes = write_kav_file(ds, synth_out);
      out << "wrote " << ds.size() << " records (" << bytes << " bytes)\n";
    };
  });

  // convert -----------------------------------------------------------------
  struct {
    std::string input, output, format = "auto";
    std::uint32_t num_classes = 0;
  } conv_opts;
  auto* conv_cmd = app.add_subcommand("convert", "Convert between binary KAV and CSV by extension");
  conv_cmd->add_option("--input", conv_opts.input, "Source file")->required();
  conv_cmd->add_option("--output", conv_opts.output, "Destination (.csv for text)")->required();
  conv_cmd->add_option("--format", conv_opts.format, "Input format")
      ->check(CLI::IsMember({"auto", "kav", "csv"}));
  conv_cmd->add_option("--num-classes", conv_opts.num_classes, "Class count for CSV input");
  conv_cmd->callback([&] {
    action = [&] {
      const auto ds = detail::load_dataset(conv_opts.input, conv_opts.format, conv_opts.num_classes);
      if (detail::is_csv_path(conv_opts.output)) {
        if (ds.has_logits()) err << "kavguard: note: CSV has no logits column, logits dropped\n";
        detail::write_text_file(conv_opts.output, [&](std::ostream& o) { write_kav_csv(ds, o); });
      } else {
        write_kav_file(ds, conv_opts.output);
      }
      out << "converted " << ds.size() << " records\n";
    };
  });

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "kavguard: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (verbosity > 0) err << "kavguard: threads=" << default_threads() << '\n';
    if (action) action();
    return kExitOk;
  } catch (const UsageError& e) {
    err << "kavguard: usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "kavguard: format error: " << e.what() << '\n';
    return kExitFormat;
  } catch (const IoError& e) {
    err << "kavguard: I/O error: " << e.what() << '\n';
    return kExitIo;
  }
}

}  // namespace kavguard::cli
