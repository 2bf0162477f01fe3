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

#include "damrs/model.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

namespace damrs {
namespace {

ModelState tables(const Matrix& users, const Matrix& items, Backbone b, int layers) {
  ModelState s;
  s.config.dim = static_cast<int>(users.cols());
  s.config.backbone = b;
  s.config.backbone_layers = layers;
  s.user_table = users;
  s.item_table = items;
  return s;
}

TEST(Backbone, MfReturnsTablesVerbatim) {
  std::mt19937_64 gen(1);
  const auto ds = testing::random_dataset(5, 6, 3, gen, false);
  const auto st = tables(testing::random_matrix(5, 3, gen), testing::random_matrix(6, 3, gen), Backbone::kMF, 2);
  const auto out = backbone_forward(st, bipartite_adjacency(ds));
  EXPECT_EQ(out.users, st.user_table);
  EXPECT_EQ(out.items, st.item_table);
}

TEST(Backbone, LightGcnZeroLayersEqualsMf) {
  std::mt19937_64 gen(2);
  const auto ds = testing::random_dataset(5, 6, 3, gen, false);
  const auto st = tables(testing::random_matrix(5, 3, gen), testing::random_matrix(6, 3, gen), Backbone::kLightGCN, 0);
  const auto out = backbone_forward(st, bipartite_adjacency(ds));
  EXPECT_EQ(out.users, st.user_table);
  EXPECT_EQ(out.items, st.item_table);
}

TEST(Backbone, LightGcnOneLayerUnitGraph) {
  const InteractionDataset ds(1, 1, {{0, 0}}, {}, {});
  Matrix xu(1, 2), xi(1, 2);
  xu << 1.0, -2.0;
  xi << 3.0, 5.0;
  const auto st = tables(xu, xi, Backbone::kLightGCN, 1);
  const auto out = backbone_forward(st, bipartite_adjacency(ds));
  const Matrix mean = 0.5 * (xu + xi);
  EXPECT_TRUE(out.users.isApprox(mean, 1e-15));
  EXPECT_TRUE(out.items.isApprox(mean, 1e-15));
}

TEST(Backbone, EdgelessGraphKeepsLayerZeroAndZerosDeeper) {
  const InteractionDataset ds(2, 3, {}, {}, {});
  std::mt19937_64 gen(3);
  const auto st = tables(testing::random_matrix(2, 4, gen), testing::random_matrix(3, 4, gen), Backbone::kLightGCN, 3);
  const auto out = backbone_forward(st, bipartite_adjacency(ds));
  EXPECT_TRUE(out.users.allFinite());
  EXPECT_TRUE(out.users.isApprox(st.user_table / 4.0, 1e-15));
  EXPECT_TRUE(out.items.isApprox(st.item_table / 4.0, 1e-15));
}

TEST(Backbone, BipartiteNormalization) {
  // User 0 has items {0,1}; user 1 has item {1}.
  const InteractionDataset ds(2, 2, {{0, 0}, {0, 1}, {1, 1}}, {}, {});
  const Eigen::MatrixXd a(bipartite_adjacency(ds));
  EXPECT_NEAR(a(0, 2), 1.0 / std::sqrt(2.0 * 1.0), 1e-15);
  EXPECT_NEAR(a(0, 3), 1.0 / std::sqrt(2.0 * 2.0), 1e-15);
  EXPECT_NEAR(a(1, 3), 1.0 / std::sqrt(1.0 * 2.0), 1e-15);
  EXPECT_EQ(a(1, 2), 0.0);
  EXPECT_TRUE(a.isApprox(a.transpose()));
}

TEST(Backbone, BackwardIsAdjointOfForward) {
  std::mt19937_64 gen(4);
  const auto ds = testing::random_dataset(7, 9, 4, gen, false);
  const SparseMatrix a = bipartite_adjacency(ds);
  const SparseMatrix at = a.transpose();
  auto st = tables(testing::random_matrix(7, 3, gen), testing::random_matrix(9, 3, gen), Backbone::kLightGCN, 2);
  const Matrix gu = testing::random_matrix(7, 3, gen);
  const Matrix gi = testing::random_matrix(9, 3, gen);
  // <F(x), g> = <x, F^T(g)>
  const auto fx = backbone_forward(st, a);
  const auto bg = backbone_backward(st, at, gu, gi);
  const double lhs = fx.users.cwiseProduct(gu).sum() + fx.items.cwiseProduct(gi).sum();
  const double rhs = st.user_table.cwiseProduct(bg.users).sum() + st.item_table.cwiseProduct(bg.items).sum();
  EXPECT_NEAR(lhs, rhs, 1e-12);
}

TEST(ItemGraph, ZeroLayersReturnsInput) {
  std::mt19937_64 gen(5);
  const Matrix x = testing::random_matrix(4, 3, gen);
  SparseItemGraph g;
  g.num_items = 4;
  g.edges = {{0, 1, 1.0}, {1, 0, 1.0}};
  EXPECT_EQ(itemgraph_propagate(x, normalize_adjacency(g), 0), x);
}

TEST(ItemGraph, SelfLoopsAreIdentity) {
  std::mt19937_64 gen(6);
  const Matrix x = testing::random_matrix(4, 3, gen);
  SparseItemGraph g;
  g.num_items = 4;
  for (int i = 0; i < 4; ++i) g.edges.push_back({i, i, 1.0});
  const auto n = normalize_adjacency(g);
  for (const int l : {1, 2, 5}) EXPECT_EQ(itemgraph_propagate(x, n, l), x);
}

TEST(ItemGraph, TwoNodeHalfWeightsAverageRows) {
  SparseItemGraph g;
  g.num_items = 2;
  g.edges = {{0, 0, 1.0}, {0, 1, 1.0}, {1, 0, 1.0}, {1, 1, 1.0}};
  const auto n = normalize_adjacency(g);
  Matrix x(2, 2);
  x << 1, 2, 5, 10;
  const Matrix h = itemgraph_propagate(x, n, 1);
  EXPECT_DOUBLE_EQ(h(0, 0), 3.0);
  EXPECT_DOUBLE_EQ(h(1, 1), 6.0);
}

TEST(ItemGraph, ReturnsLastLayerNotMean) {
  SparseItemGraph g;
  g.num_items = 2;
  g.edges = {{0, 1, 1.0}, {1, 0, 1.0}};  // swap operator
  const auto n = normalize_adjacency(g);
  Matrix x(2, 1);
  x << 1, 4;
  const Matrix h = itemgraph_propagate(x, n, 1);
  EXPECT_EQ(h(0, 0), 4.0);
  EXPECT_EQ(h(1, 0), 1.0);
}

TEST(ItemGraph, PropagationIsLinear) {
  std::mt19937_64 gen(7);
  SparseItemGraph g;
  g.num_items = 6;
  std::uniform_real_distribution<double> w(0.1, 2.0);
  for (int i = 0; i < 6; ++i) {
    for (int j = 0; j < 6; ++j) {
      if ((i + 2 * j) % 3 == 0) g.edges.push_back({i, j, w(gen)});
    }
  }
  std::sort(g.edges.begin(), g.edges.end());
  const auto n = normalize_adjacency(g);
  const Matrix x = testing::random_matrix(6, 4, gen);
  const Matrix y = testing::random_matrix(6, 4, gen);
  const double a = 0.7, b = -1.9;
  const Matrix lhs = itemgraph_propagate(a * x + b * y, n, 3);
  const Matrix rhs = a * itemgraph_propagate(x, n, 3) + b * itemgraph_propagate(y, n, 3);
  EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Fusion, Examples) {
  std::mt19937_64 gen(8);
  const Matrix x = testing::random_matrix(3, 2, gen);
  const auto same = fuse_item(x, {x, x, x});
  EXPECT_TRUE(same.t.isApprox(x, 1e-15));
  const auto half = fuse_item(Matrix::Zero(3, 2), {x, x, x});
  EXPECT_TRUE(half.t.isApprox(x / 2.0, 1e-15));

  Matrix id(1, 1), v(1, 1), t(1, 1), c(1, 1);
  id << 2;
  v << 1;
  t << 3;
  c << 5;
  const auto f = fuse_item(id, {v, t, c});
  EXPECT_DOUBLE_EQ(f.h_mm(0, 0), 3.0);
  EXPECT_DOUBLE_EQ(f.t(0, 0), 2.5);
}

TEST(Fusion, PermutationInvariant) {
  std::mt19937_64 gen(9);
  const Matrix id = testing::random_matrix(4, 3, gen);
  const Matrix a = testing::random_matrix(4, 3, gen);
  const Matrix b = testing::random_matrix(4, 3, gen);
  const Matrix c = testing::random_matrix(4, 3, gen);
  const auto f1 = fuse_item(id, {a, b, c});
  const auto f2 = fuse_item(id, {c, a, b});
  EXPECT_LT((f1.t - f2.t).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Fusion, ShapeMismatchIsDimensionError) {
  EXPECT_THROW(fuse_item(Matrix::Zero(3, 2), {Matrix::Zero(3, 3)}), DimensionError);
}

TEST(Score, DotProducts) {
  Eigen::RowVector2d u(1, 2), t(3, -1), o(2, -1);
  EXPECT_EQ(score(u, t), 1.0);
  EXPECT_EQ(score(u, o), 0.0);
  EXPECT_EQ(score(Eigen::RowVector2d::Zero(), t), 0.0);
  EXPECT_EQ(modality_score(u, t), 1.0);
  EXPECT_THROW(score(u, Eigen::RowVector3d(1, 2, 3)), DimensionError);
}

TEST(Init, XavierBoundMeanAndDeterminism) {
  ModelConfig mc;
  mc.dim = 32;
  const auto a = init_parameters(300, 500, 0, mc, 42);
  const auto b = init_parameters(300, 500, 0, mc, 42);
  EXPECT_EQ(a.user_table, b.user_table);
  EXPECT_EQ(a.item_table, b.item_table);
  const double bu = std::sqrt(6.0 / (300 + 32));
  const double bi = std::sqrt(6.0 / (500 + 32));
  EXPECT_LE(a.user_table.cwiseAbs().maxCoeff(), bu);
  EXPECT_LE(a.item_table.cwiseAbs().maxCoeff(), bi);
  EXPECT_NEAR(a.item_table.mean(), 0.0, 5.0 * bi / std::sqrt(3.0 * 500 * 32));
  const auto c = init_parameters(300, 500, 0, mc, 43);
  EXPECT_NE(a.user_table, c.user_table);
}

TEST(Init, SeparateTablesPerGraph) {
  ModelConfig mc;
  mc.dim = 4;
  mc.separate_modality_tables = true;
  const auto s = init_parameters(3, 5, 3, mc, 1);
  ASSERT_EQ(s.modality_tables.size(), 3u);
  EXPECT_NE(s.modality_tables[0], s.modality_tables[1]);
}

TEST(ModelTest, UserEmbeddingsIgnoreItemGraphs) {
  std::mt19937_64 gen(10);
  const auto ds = testing::random_dataset(6, 8, 4, gen, false);
  std::vector<ModalityFeatures> f{{"v", testing::random_matrix(8, 3, gen)}, {"t", testing::random_matrix(8, 3, gen)}};
  const auto graphs = build_graph_set(ds, f, GraphConfig{3, 1, true, true, true});
  ModelConfig mc;
  mc.dim = 5;
  const auto st = init_parameters(6, 8, 3, mc, 3);
  const Model with(st, ds, &graphs);
  const Model without(st, ds, nullptr);
  const auto a = with.forward();
  const auto b = without.forward();
  EXPECT_EQ(a.u, b.u);
  EXPECT_EQ(a.h.size(), 3u);
  EXPECT_TRUE(b.h.empty());
  EXPECT_EQ(b.t, b.h_id);
}

TEST(ModelTest, BackwardIsAdjointOfForward) {
  std::mt19937_64 gen(11);
  const auto ds = testing::random_dataset(6, 8, 4, gen, false);
  std::vector<ModalityFeatures> f{{"v", testing::random_matrix(8, 3, gen)}, {"t", testing::random_matrix(8, 3, gen)}};
  const auto graphs = build_graph_set(ds, f, GraphConfig{3, 1, true, true, true});
  for (const bool separate : {false, true}) {
    ModelConfig mc;
    mc.dim = 4;
    mc.separate_modality_tables = separate;
    const Model model(init_parameters(6, 8, 3, mc, 5), ds, &graphs);
    const auto e = model.forward();
    // A linear functional on u and t only; its gradient through backward()
    // must satisfy <grad, params> = functional(forward(params)).
    Gradients g = Gradients::zeros_like(e);
    g.u = testing::random_matrix(6, 4, gen);
    g.t = testing::random_matrix(8, 4, gen);
    const auto pg = model.backward(g);
    double lhs = e.u.cwiseProduct(g.u).sum() + e.t.cwiseProduct(g.t).sum();
    double rhs = model.state().user_table.cwiseProduct(pg.user_table).sum() +
                 model.state().item_table.cwiseProduct(pg.item_table).sum();
    for (std::size_t k = 0; k < pg.modality_tables.size(); ++k) {
      rhs += model.state().modality_tables[k].cwiseProduct(pg.modality_tables[k]).sum();
    }
    EXPECT_NEAR(lhs, rhs, 1e-12) << "separate " << separate;
  }
}

TEST(ModelTest, TableShapeMismatchIsDimensionError) {
  const InteractionDataset ds(2, 3, {{0, 0}}, {}, {});
  ModelConfig mc;
  mc.dim = 2;
  EXPECT_THROW(Model(init_parameters(3, 3, 0, mc, 0), ds, nullptr), DimensionError);
}

}  // namespace
}  // namespace damrs
