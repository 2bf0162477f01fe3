/*
 * Copyright 2026 The damrs Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *   http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "damrs/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

using namespace damrs;
namespace pl = damrs::pipeline;

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  for (const auto& s : io::split(text, ',')) {
    const long long x = detail::parse_integer("--seeds", s);
    if (x < 0) throw ConfigError("seeds must be >= 0");
    seeds.push_back(static_cast<std::uint64_t>(x));
  }
  return seeds;
}

Split parse_split(const std::string& s) {
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw ConfigError("--split must be 'val' or 'test'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DA-MRS multi-modal recommendation: graphs, training, evaluation and noise experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", pl::kToolVersion);

  // prepare
  auto* prepare = app.add_subcommand("prepare", "Validate a dataset directory or generate a synthetic one");
  std::string prep_in, prep_out;
  bool synthetic = false;
  SyntheticConfig sc;
  std::string sc_modalities = "v,t";
  prepare->add_option("--in", prep_in, "Dataset directory to validate and normalize");
  prepare->add_flag("--synthetic", synthetic, "Generate a planted-block dataset");
  prepare->add_option("--users", sc.users, "Synthetic: number of users")->capture_default_str();
  prepare->add_option("--items", sc.items, "Synthetic: number of items")->capture_default_str();
  prepare->add_option("--clusters", sc.clusters, "Synthetic: preference clusters")->capture_default_str();
  prepare->add_option("--modalities", sc_modalities, "Synthetic: comma-separated modality tags")->capture_default_str();
  prepare->add_option("--feature-dim", sc.feature_dim, "Synthetic: feature width")->capture_default_str();
  prepare->add_option("--interactions", sc.interactions_per_user, "Synthetic: interactions per user")
      ->capture_default_str();
  prepare->add_option("--in-cluster", sc.in_cluster, "Synthetic: share of in-cluster interactions")
      ->capture_default_str();
  prepare->add_option("--feature-noise", sc.feature_noise, "Synthetic: feature noise scale")->capture_default_str();
  prepare->add_option("--nuisance-clusters", sc.nuisance_clusters, "Synthetic: per-modality nuisance attributes")
      ->capture_default_str();
  prepare->add_option("--nuisance-weight", sc.nuisance_weight, "Synthetic: nuisance scale")->capture_default_str();
  prepare->add_option("--seed", sc.seed, "Synthetic: seed");
  prepare->add_option("--out", prep_out, "Output dataset directory")->required();

  // inject-noise
  auto* noise = app.add_subcommand("inject-noise", "Perturb features or train feedback");
  std::string noise_kind, noise_modality, noise_in, noise_out;
  NoiseSpec spec;
  noise->add_option("--kind", noise_kind, "feature-replace | feedback-add | feedback-remove")->required();
  noise->add_option("--ratio", spec.ratio, "Fraction of rows or train pairs")->required();
  noise->add_option("--modality", noise_modality, "Target modality (feature-replace)");
  noise->add_option("--seed", spec.seed, "Noise seed")->required();
  noise->add_flag("--allow-large-ratio", spec.allow_large_ratio, "Permit ratios above 0.2");
  noise->add_option("--in", noise_in, "Input dataset directory")->required();
  noise->add_option("--out", noise_out, "Output dataset directory")->required();

  // build-graphs
  auto* graphs = app.add_subcommand("build-graphs", "Build item-item graphs for a config");
  std::string g_config, g_in, g_out;
  graphs->add_option("--config", g_config, "Config file (key = value)")->required();
  graphs->add_option("--in", g_in, "Dataset directory")->required();
  graphs->add_option("--out", g_out, "Graph output directory")->required();

  // train
  auto* trainc = app.add_subcommand("train", "Train one variant and write a checkpoint");
  std::string t_config, t_data, t_graphs, t_out;
  trainc->add_option("--config", t_config, "Config file (key = value)")->required();
  trainc->add_option("--data", t_data, "Dataset directory")->required();
  trainc->add_option("--graphs", t_graphs, "Graph directory from build-graphs");
  trainc->add_option("--out", t_out, "Checkpoint directory")->required();

  // evaluate
  auto* evalc = app.add_subcommand("evaluate", "Rank the catalog and report Recall/Precision/NDCG");
  pl::EvaluateOptions eo;
  std::string e_checkpoint, e_data, e_k = "10,20", e_split = "test", e_out;
  evalc->add_option("--checkpoint", e_checkpoint, "Checkpoint directory")->required();
  evalc->add_option("--data", e_data, "Dataset directory")->required();
  evalc->add_option("--k", e_k, "Comma-separated cutoffs")->capture_default_str();
  evalc->add_option("--split", e_split, "val | test")->capture_default_str();
  evalc->add_flag("--per-user", eo.per_user, "Also write per-user metrics");
  evalc->add_option("--out", e_out, "Output directory (default <checkpoint>/evaluation)");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Train every variant of a grid and compare them");
  std::string a_grid, a_data, a_out, a_seeds;
  ablate->add_option("--grid", a_grid, "Grid file (config keys plus variants, seeds)")->required();
  ablate->add_option("--data", a_data, "Dataset directory")->required();
  ablate->add_option("--out", a_out, "Output directory")->required();
  ablate->add_option("--seeds", a_seeds, "Comma-separated seeds (overrides the grid)");

  // robustness
  auto* robust = app.add_subcommand("robustness", "Sweep noise ratios for every variant of a grid");
  std::string r_kind, r_grid, r_data, r_out, r_seeds, r_modality;
  pl::RobustnessOptions ro;
  robust->add_option("--kind", r_kind, "feature-replace | feedback-add | feedback-remove")->required();
  robust->add_option("--grid", r_grid, "Grid file (config keys plus variants, seeds, ratios)")->required();
  robust->add_option("--data", r_data, "Dataset directory")->required();
  robust->add_option("--out", r_out, "Output directory")->required();
  robust->add_option("--seeds", r_seeds, "Comma-separated seeds (overrides the grid)");
  robust->add_option("--modality", r_modality, "Target modality (feature-replace)");
  robust->add_flag("--allow-large-ratio", ro.allow_large_ratio, "Permit ratios above 0.2");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*prepare) {
      pl::PrepareOptions po;
      po.out = prep_out;
      if (!prep_in.empty()) po.input = prep_in;
      if (synthetic) {
        sc.modalities = io::split(sc_modalities, ',');
        po.synthetic = sc;
      }
      pl::cmd_prepare(po, std::cout);
    } else if (*noise) {
      spec.kind = parse_noise_kind(noise_kind);
      if (!noise_modality.empty()) spec.target_modality = noise_modality;
      pl::cmd_inject_noise({spec, noise_in, noise_out}, std::cout);
    } else if (*graphs) {
      pl::cmd_build_graphs(g_config, g_in, g_out, std::cout);
    } else if (*trainc) {
      return pl::cmd_train(t_config, t_data, t_graphs.empty() ? std::nullopt : std::optional<std::filesystem::path>(t_graphs),
                           t_out, std::cout);
    } else if (*evalc) {
      eo.checkpoint = e_checkpoint;
      eo.data = e_data;
      eo.ks = parse_k_list(e_k);
      eo.split = parse_split(e_split);
      if (!e_out.empty()) eo.out = e_out;
      pl::cmd_evaluate(eo, std::cout);
    } else if (*ablate) {
      auto grid = pl::load_grid(a_grid);
      if (!a_seeds.empty()) grid.seeds = parse_seed_list(a_seeds);
      pl::cmd_ablate(grid, a_data, a_out, pl::worker_limit(), std::cout);
    } else if (*robust) {
      ro.kind = parse_noise_kind(r_kind);
      auto grid = pl::load_grid(r_grid);
      if (!r_seeds.empty()) grid.seeds = parse_seed_list(r_seeds);
      if (!r_modality.empty()) grid.modality = r_modality;
      pl::cmd_robustness(grid, ro, r_data, r_out, pl::worker_limit(), std::cout);
    }
  } catch (const damrs::ConfigError& e) {
    std::cerr << "damrs: configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "damrs: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
