#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "olfsl/model.hpp"
#include "support.hpp"

using namespace olfsl;
using namespace testsup;

namespace {

ModelConfig desk_config() {
  ModelConfig cfg;
  cfg.input_size = 16;
  cfg.channels = 1;
  cfg.d = 4;
  cfg.c = 8;
  cfg.feature_stack = parse_feature_stack("conv:8,maxpool:2:2,conv:8,maxpool:2:2");
  cfg.relation_hidden = {16, 16};
  cfg.relation_out = 16;
  cfg.similarity_hidden = {16};
  return cfg;
}

template <typename T>
ObjectGrid<T> random_grid(int d, int c, Rng& rng) {
  Tensor<T> g = Tensor<T>::zeros({d, d, c});
  for (auto& v : g.data) v = static_cast<T>(rng.uniform(-1.0, 1.0));
  return ObjectGrid<T>(d, c, std::move(g));
}

}  // namespace

TEST_CASE("feature stack parsing round-trips") {
  const std::string text = "conv:8,maxpool:2:2,conv:16,avgpool:4:1";
  auto stack = parse_feature_stack(text);
  CHECK(format_feature_stack(stack) == text);
  CHECK_THROWS_AS(parse_feature_stack("conv"), ConfigError);
  CHECK_THROWS_AS(parse_feature_stack("dropout:0.5"), ConfigError);
  CHECK_THROWS_AS(parse_feature_stack("maxpool:2"), ConfigError);
}

TEST_CASE("derive_feature_stack halves down to d") {
  auto stack = derive_feature_stack(16, 4, 8);
  ModelConfig cfg = desk_config();
  cfg.feature_stack = stack;
  auto [size, channels] = feature_output_shape(cfg);
  CHECK(size == 4);
  CHECK(channels == 8);
  CHECK_THROWS_AS(derive_feature_stack(16, 3, 8), ConfigError);
  CHECK_THROWS_AS(derive_feature_stack(16, 5, 8), ConfigError);
  auto deep = derive_feature_stack(16, 1, 4);
  cfg.feature_stack = deep;
  cfg.d = 1;
  cfg.c = 4;
  auto [s1, c1] = feature_output_shape(cfg);
  CHECK(s1 == 1);
  CHECK(c1 == 4);
}

TEST_CASE("config validation rejects a stack that misses (d,d,c)") {
  ModelConfig cfg = desk_config();
  validate_model_config(cfg);  // sane baseline
  cfg.d = 2;                   // stack still produces 4
  CHECK_THROWS_AS(validate_model_config(cfg), ConfigError);
  cfg = desk_config();
  cfg.c = 16;
  CHECK_THROWS_AS(validate_model_config(cfg), ConfigError);
}

TEST_CASE("ObjectGrid accessors reconstruct the grid exactly") {
  Rng rng(21);
  auto grid = random_grid<double>(3, 5, rng);
  CHECK(grid.object_count() == 9);
  std::vector<double> flat;
  for (int i = 0; i < grid.object_count(); ++i) {
    auto obj = grid.object(i);
    CHECK(obj.shape == Shape{5});
    flat.insert(flat.end(), obj.data.begin(), obj.data.end());
  }
  CHECK(flat == grid.grid.data);
  CHECK_THROWS_AS(grid.object(9), LogicError);
}

TEST_CASE("extract_objects produces the configured grid on the desk stack") {
  ModelConfig cfg = desk_config();
  auto params = init_params<double>(cfg, 31);
  Rng rng(32);
  auto img = random_tensor({16, 16, 1}, rng, 0.0, 1.0);
  auto grid = extract_objects(img, params.feature, cfg);
  CHECK(grid.d == 4);
  CHECK(grid.c == 8);
  CHECK(grid.grid.shape == Shape{4, 4, 8});

  auto wrong = random_tensor({8, 8, 1}, rng);
  CHECK_THROWS_AS(extract_objects(wrong, params.feature, cfg), ConfigError);
}

TEST_CASE("the 84x84 stack yields a 7x7x64 object grid") {
  ModelConfig cfg;
  cfg.input_size = 84;
  cfg.channels = 1;
  cfg.d = 7;
  cfg.c = 64;
  cfg.feature_stack =
      parse_feature_stack("conv:64,maxpool:2:2,conv:64,maxpool:2:2,conv:64,maxpool:2:2,conv:64,avgpool:4:1");
  cfg.relation_hidden = {256, 256};
  cfg.relation_out = 256;
  validate_model_config(cfg);
  auto params = init_params<float>(cfg, 41);
  Rng rng(42);
  Tensor<float> img = Tensor<float>::zeros({84, 84, 1});
  for (auto& v : img.data) v = static_cast<float>(rng.uniform(0.0, 1.0));
  auto grid = extract_objects(img, params.feature, cfg);
  CHECK(grid.d == 7);
  CHECK(grid.c == 64);
}

TEST_CASE("the 224x224 stack yields a 10x10x64 object grid") {
  ModelConfig cfg;
  cfg.input_size = 224;
  cfg.channels = 3;
  cfg.d = 10;
  cfg.c = 64;
  // same shape as the 84x84 stack except the final average pool has a larger
  // kernel and stride
  cfg.feature_stack = parse_feature_stack(
      "conv:64,maxpool:2:2,conv:64,maxpool:2:2,conv:64,maxpool:2:2,conv:64,avgpool:10:2");
  cfg.relation_hidden = {256, 256};
  cfg.relation_out = 256;
  validate_model_config(cfg);
  auto [size, channels] = feature_output_shape(cfg);
  CHECK(size == 10);
  CHECK(channels == 64);
  auto params = init_params<float>(cfg, 43);
  Rng rng(44);
  Tensor<float> img = Tensor<float>::zeros({224, 224, 3});
  for (auto& v : img.data) v = static_cast<float>(rng.uniform(0.0, 1.0));
  auto grid = extract_objects(img, params.feature, cfg);
  CHECK(grid.d == 10);
  CHECK(grid.c == 64);
}

TEST_CASE("combine cardinality: d^4 all_pairs rows and d^2 same_location for d in 1..10") {
  Rng rng(51);
  for (int d = 1; d <= 10; ++d) {
    auto a = random_grid<double>(d, 3, rng);
    auto b = random_grid<double>(d, 3, rng);
    auto pairs = combine(a, b, CombineRule::all_pairs);
    CHECK(pairs.shape == Shape{d * d * d * d, 6});
    auto same = combine(a, b, CombineRule::same_location);
    CHECK(same.shape == Shape{d * d, 6});
  }
}

TEST_CASE("combine matches per-object concatenation, row-major (i,j)") {
  Rng rng(52);
  const int d = 3, c = 4;
  auto a = random_grid<double>(d, c, rng);
  auto b = random_grid<double>(d, c, rng);
  auto pairs = combine(a, b, CombineRule::all_pairs);
  const int dd = d * d;
  for (int i = 0; i < dd; ++i) {
    for (int j = 0; j < dd; ++j) {
      auto want = concat(a.object(i), b.object(j));
      for (int t = 0; t < 2 * c; ++t) CHECK(pairs.at(i * dd + j, t) == want.at(t));
    }
  }
  auto same = combine(a, b, CombineRule::same_location);
  for (int i = 0; i < dd; ++i) {
    auto want = concat(a.object(i), b.object(i));
    for (int t = 0; t < 2 * c; ++t) CHECK(same.at(i, t) == want.at(t));
  }
}

TEST_CASE("paper-scale combination counts: 2401 at d=7 and 10000 at d=10") {
  Rng rng(53);
  auto a7 = random_grid<double>(7, 64, rng);
  auto b7 = random_grid<double>(7, 64, rng);
  auto p7 = combine(a7, b7, CombineRule::all_pairs);
  CHECK(p7.shape == Shape{2401, 128});

  auto a10 = random_grid<double>(10, 64, rng);
  auto b10 = random_grid<double>(10, 64, rng);
  auto p10 = combine(a10, b10, CombineRule::all_pairs);
  CHECK(p10.shape == Shape{10000, 128});
}

TEST_CASE("grid shape mismatch is fatal") {
  Rng rng(54);
  auto a = random_grid<double>(3, 4, rng);
  auto b = random_grid<double>(2, 4, rng);
  CHECK_THROWS_AS(combine(a, b, CombineRule::all_pairs), ConfigError);
}

TEST_CASE("relate applies one MLP independently to every pair row") {
  ModelConfig cfg = desk_config();
  auto params = init_params<double>(cfg, 61);
  Rng rng(62);
  auto a = random_grid<double>(4, 8, rng);
  auto b = random_grid<double>(4, 8, rng);
  auto pairs = combine(a, b, CombineRule::all_pairs);
  auto rel = relate(pairs, params.relation, cfg);
  CHECK(rel.shape == Shape{256, 16});

  // identical input rows -> identical output rows
  Tensor<double> two = Tensor<double>::zeros({2, 16});
  for (int t = 0; t < 16; ++t) two.at(0, t) = two.at(1, t) = pairs.at(3, t);
  auto out2 = relate(two, params.relation, cfg);
  for (int t = 0; t < 16; ++t) CHECK(out2.at(0, t) == out2.at(1, t));

  // batched row equals the same row pushed through alone
  Tensor<double> one = Tensor<double>::zeros({1, 16});
  for (int t = 0; t < 16; ++t) one.at(0, t) = pairs.at(3, t);
  auto out1 = relate(one, params.relation, cfg);
  for (int t = 0; t < 16; ++t) CHECK(out1.at(0, t) == doctest::Approx(rel.at(3, t)).epsilon(1e-12));
}

TEST_CASE("relate at the paper's Omniglot width: 2401 rows of dimension 256") {
  ModelConfig cfg;
  cfg.input_size = 84;
  cfg.channels = 1;
  cfg.d = 7;
  cfg.c = 64;
  cfg.feature_stack =
      parse_feature_stack("conv:64,maxpool:2:2,conv:64,maxpool:2:2,conv:64,maxpool:2:2,conv:64,avgpool:4:1");
  cfg.relation_hidden = {256, 256};
  cfg.relation_out = 256;
  auto params = init_params<float>(cfg, 63);
  Rng rng(64);
  ObjectGrid<float> a(7, 64, [&] {
    auto t = Tensor<float>::zeros({7, 7, 64});
    for (auto& v : t.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    return t;
  }());
  ObjectGrid<float> b(7, 64, [&] {
    auto t = Tensor<float>::zeros({7, 7, 64});
    for (auto& v : t.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    return t;
  }());
  auto pairs = combine(a, b, CombineRule::all_pairs);
  CHECK(pairs.shape == Shape{2401, 128});
  auto rel = relate(pairs, params.relation, cfg);
  CHECK(rel.shape == Shape{2401, 256});
}

TEST_CASE("hand-sized MLP matrix products match an explicit oracle") {
  // 4 -> 3 -> 2 network checked against dense_oracle composition
  ModelConfig cfg = desk_config();
  cfg.c = 2;  // pair width 4
  cfg.relation_hidden = {3};
  cfg.relation_out = 2;
  Rng rng(65);
  NamedTensors<double> relation;
  relation.emplace("fc0.weight", random_tensor({4, 3}, rng));
  relation.emplace("fc0.bias", random_tensor({3}, rng));
  relation.emplace("fc1.weight", random_tensor({3, 2}, rng));
  relation.emplace("fc1.bias", random_tensor({2}, rng));

  auto row = random_tensor({1, 4}, rng);
  auto got = relate(row, relation, cfg);

  Tensor<double> x({4}, {row.at(0, 0), row.at(0, 1), row.at(0, 2), row.at(0, 3)});
  auto h = dense_oracle(x, relation.at("fc0.weight"), relation.at("fc0.bias"));
  for (auto& v : h.data) v = std::max(v, 0.0);
  auto want = dense_oracle(h, relation.at("fc1.weight"), relation.at("fc1.bias"));
  for (int t = 0; t < 2; ++t) CHECK(std::abs(got.at(0, t) - want.at(t)) < kTightTol);
}

TEST_CASE("aggregate sums element-wise and ignores order") {
  std::vector<Tensor<double>> rel{Tensor<double>({2}, {1, 2}), Tensor<double>({2}, {3, 4})};
  auto m = aggregate(rel);
  CHECK(m.data == std::vector<double>{4, 6});

  CHECK_THROWS_AS(aggregate(std::vector<Tensor<double>>{}), ConfigError);

  Rng rng(66);
  std::vector<Tensor<double>> many;
  const int d4 = 81;  // d=3
  for (int i = 0; i < d4; ++i) many.push_back(random_tensor({16}, rng));
  auto base = aggregate(many);

  // sequential-accumulation oracle
  Tensor<double> want = Tensor<double>::zeros({16});
  for (const auto& t : many) {
    for (int j = 0; j < 16; ++j) want.at(j) += t.at(j);
  }
  CHECK(max_abs_diff(base, want) < kOracleTol);

  auto perm = many;
  rng.shuffle(perm);
  CHECK(aggregate(perm).data == base.data);

  // batched form agrees with the list form
  Tensor<double> rows = Tensor<double>::zeros({d4, 16});
  for (int i = 0; i < d4; ++i) {
    for (int j = 0; j < 16; ++j) rows.at(i, j) = many[static_cast<std::size_t>(i)].at(j);
  }
  CHECK(max_abs_diff(aggregate(rows), base) < kOracleTol);
}

TEST_CASE("similarity outputs sigmoid of an affine map") {
  ModelConfig cfg = desk_config();
  auto params = init_params<double>(cfg, 71);

  // zero input with zero biases -> exactly 0.5
  auto zero = Tensor<double>::zeros({16});
  auto s0 = similarity(zero, params.similarity, cfg);
  CHECK(s0.item() == doctest::Approx(0.5).epsilon(1e-15));

  Rng rng(72);
  for (int trial = 0; trial < 50; ++trial) {
    auto m = random_tensor({16}, rng, -20.0, 20.0);
    const double s = similarity(m, params.similarity, cfg).item();
    CHECK(s > 0.0);
    CHECK(s < 1.0);
  }

  // explicit affine+sigmoid oracle on a 1-hidden-layer head
  NamedTensors<double> head;
  head.emplace("fc0.weight", random_tensor({16, 16}, rng));
  head.emplace("fc0.bias", random_tensor({16}, rng));
  head.emplace("fc1.weight", random_tensor({16, 1}, rng));
  head.emplace("fc1.bias", random_tensor({1}, rng));
  auto m = random_tensor({16}, rng);
  const double got = similarity(m, head, cfg).item();
  auto h = dense_oracle(m, head.at("fc0.weight"), head.at("fc0.bias"));
  for (auto& v : h.data) v = std::max(v, 0.0);
  const double logit = dense_oracle(h, head.at("fc1.weight"), head.at("fc1.bias")).at(0);
  CHECK(std::abs(got - 1.0 / (1.0 + std::exp(-logit))) < kTightTol);
}

TEST_CASE("average_support: identity, mean, linearity") {
  Rng rng(81);
  auto g1 = random_grid<double>(3, 4, rng);

  // K=1 returns the input unchanged
  auto avg1 = average_support(std::vector<ObjectGrid<double>>{g1});
  CHECK(avg1.grid.data == g1.grid.data);

  // K copies of the same grid -> that grid
  auto same = average_support(std::vector<ObjectGrid<double>>{g1, g1, g1});
  CHECK(max_abs_diff(same.grid, g1.grid) < kTightTol);

  // K=3 random grids vs element-wise mean oracle
  auto g2 = random_grid<double>(3, 4, rng);
  auto g3 = random_grid<double>(3, 4, rng);
  auto avg = average_support(std::vector<ObjectGrid<double>>{g1, g2, g3});
  for (std::size_t i = 0; i < g1.grid.data.size(); ++i) {
    const double want = (g1.grid.data[i] + g2.grid.data[i] + g3.grid.data[i]) / 3.0;
    CHECK(avg.grid.data[i] == doctest::Approx(want).epsilon(1e-12));
  }

  // commutes with scaling every input
  const double alpha = 2.75;
  auto s1 = g1, s2 = g2, s3 = g3;
  for (auto* g : {&s1, &s2, &s3}) {
    for (auto& v : g->grid.data) v *= alpha;
  }
  auto scaled = average_support(std::vector<ObjectGrid<double>>{s1, s2, s3});
  for (std::size_t i = 0; i < avg.grid.data.size(); ++i) {
    CHECK(scaled.grid.data[i] == doctest::Approx(alpha * avg.grid.data[i]).epsilon(1e-12));
  }

  CHECK_THROWS_AS(average_support(std::vector<ObjectGrid<double>>{}), ConfigError);
}

TEST_CASE("score_pair stays in (0,1), is deterministic, and is asymmetric") {
  ModelConfig cfg = desk_config();
  auto params = init_params<double>(cfg, 91);
  Rng rng(92);
  bool found_asymmetry = false;
  for (int trial = 0; trial < 10; ++trial) {
    auto a = random_grid<double>(4, 8, rng);
    auto b = random_grid<double>(4, 8, rng);
    const double s_ab = score_pair(a, b, params, cfg).item();
    const double s_ab2 = score_pair(a, b, params, cfg).item();
    CHECK(s_ab > 0.0);
    CHECK(s_ab < 1.0);
    CHECK(s_ab == s_ab2);
    const double s_ba = score_pair(b, a, params, cfg).item();
    if (std::abs(s_ab - s_ba) > 1e-9) found_asymmetry = true;
  }
  // concatenation order matters under all_pairs: swapping the arguments
  // changes the score for generic inputs
  CHECK(found_asymmetry);
}

TEST_CASE("score_pair is invariant under pair-enumeration relabeling") {
  ModelConfig cfg = desk_config();
  auto params = init_params<double>(cfg, 93);
  Rng rng(94);
  auto a = random_grid<double>(4, 8, rng);
  auto b = random_grid<double>(4, 8, rng);
  const double direct = score_pair(a, b, params, cfg).item();

  // same pipeline with the relation rows permuted before aggregation
  auto pairs = combine(a, b, cfg.combine_rule);
  auto rel = relate(pairs, params.relation, cfg);
  std::vector<int> order(256);
  for (int i = 0; i < 256; ++i) order[static_cast<std::size_t>(i)] = i;
  for (int trial = 0; trial < 5; ++trial) {
    rng.shuffle(order);
    Tensor<double> shuffled = Tensor<double>::zeros({256, 16});
    for (int i = 0; i < 256; ++i) {
      for (int j = 0; j < 16; ++j) shuffled.at(i, j) = rel.at(order[static_cast<std::size_t>(i)], j);
    }
    const double permuted = similarity(aggregate(shuffled), params.similarity, cfg).item();
    CHECK(permuted == doctest::Approx(direct).epsilon(1e-9));
  }
}

TEST_CASE("one backward pass reaches every parameter group") {
  ModelConfig cfg = desk_config();
  auto params = init_params<double>(cfg, 95);
  Rng rng(96);
  auto img_a = random_tensor({16, 16, 1}, rng, 0.0, 1.0);
  auto img_b = random_tensor({16, 16, 1}, rng, 0.0, 1.0);

  Tape<double> tape;
  auto watched = watch_params(tape, params);
  auto ga = extract_objects(img_a, watched.feature, cfg);
  auto gb = extract_objects(img_b, watched.feature, cfg);
  auto s = score_pair(ga, gb, watched, cfg);
  auto grads = tape.backward_gradients(s, watched.flat());

  for (const auto& [name, g] : grads) {
    double peak = 0.0;
    for (double v : g.data) peak = std::max(peak, std::abs(v));
    INFO("parameter " << name);
    CHECK(peak > 1e-12);
  }
}

TEST_CASE("parameter checksums detect mutation") {
  ModelConfig cfg = desk_config();
  auto params = init_params<double>(cfg, 97);
  const auto before = checksum_params(params);
  CHECK(before == checksum_params(params));
  params.relation.at("fc0.weight").data[0] += 1e-9;
  CHECK(before != checksum_params(params));
}

TEST_CASE("init_params is deterministic per seed and seed-sensitive") {
  ModelConfig cfg = desk_config();
  auto a = init_params<double>(cfg, 1);
  auto b = init_params<double>(cfg, 1);
  CHECK(checksum_params(a) == checksum_params(b));
  auto c = init_params<double>(cfg, 2);
  CHECK(checksum_params(a) != checksum_params(c));

  // fan-in bound and zero biases
  const auto& w = a.feature.at("conv0.weight");
  const double bound = 1.0 / 3.0;  // 1/sqrt(9*1)
  for (double v : w.data) CHECK(std::abs(v) <= bound);
  for (double v : a.feature.at("conv0.bias").data) CHECK(v == 0.0);
}
