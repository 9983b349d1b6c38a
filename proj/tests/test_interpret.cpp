#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "refex/interpret.hpp"

using namespace refex;

namespace {

Example paper_worked_example() {
  GridWorld w;
  w.variant = Variant::two_attr;
  w.cells[5] = {Color::red, Shape::cylinder, std::nullopt};
  w.cells[9] = {Color::blue, Shape::cylinder, std::nullopt};
  w.cells[20] = {Color::red, Shape::circle, std::nullopt};
  w.cells[30] = {Color::green, Shape::square, std::nullopt};
  Example ex{w, TwoAttrCmd{Color::red, Shape::cylinder}, 5, {}};
  ex.tags = tag_splits(ex);
  return ex;
}

std::vector<Example> sample_examples(Variant v, int n, uint64_t seed) {
  const GenSpec spec = GenSpec::defaults(v, seed);
  std::vector<Example> out;
  for (int i = 0; i < n; ++i) {
    StreamRng rng(seed, static_cast<uint64_t>(i));
    out.push_back(generate_example(spec, rng));
  }
  return out;
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("refex_interp_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("extract_M with identity projections is the embedding Gram matrix") {
  const EmbeddingTable t = EmbeddingTable::make(Variant::two_attr);
  ModelConfig config;
  config.variant = Variant::two_attr;
  auto w = zero_weights<double>(config, t);
  w.layers[0].heads[0].w_q = MatD::Identity(13, 13);
  w.layers[0].heads[0].w_k = MatD::Identity(13, 13);
  const VocabMatrix m = extract_M(w, t);
  CHECK(m.m(t.token_id("red"), t.token_id("red")) == doctest::Approx(1.0));
  CHECK(m.m(t.token_id("red"), t.token_id("green")) == doctest::Approx(0.0));
  CHECK(m.m(t.token_id("red_circle"), t.token_id("red_circle")) == doctest::Approx(2.0));
  CHECK(m.m(t.token_id("empty"), t.token_id("empty")) == doctest::Approx(4.0));  // 2 on one dim, squared

  CHECK_THROWS_AS((void)extract_M(w, t, 1, 0), contract_violation);
  CHECK_THROWS_AS((void)extract_M(w, t, 0, 2), contract_violation);
}

TEST_CASE("construction: M matches the analytic bilinear table exactly") {
  for (Variant v : {Variant::two_attr, Variant::three_attr}) {
    ConstructionParams params;
    params.variant = v;
    const EmbeddingTable t = EmbeddingTable::make(v);
    const MatD b = construction_bilinear(params, t);
    const VecD rd = construction_readout(params, t);
    const auto w = build_construction(params).cast<double>();

    const VocabMatrix m = extract_M(w, t);
    const VecD s = extract_s(w, t);
    for (int a = 0; a < t.vocab_size(); ++a) {
      for (int k = 0; k < t.vocab_size(); ++k) {
        const double analytic = t.matrix().col(a).transpose() * b * t.matrix().col(k);
        CHECK(std::abs(m.m(a, k) - analytic) < 1e-6);
      }
      CHECK(std::abs(s(a) - rd.dot(t.matrix().col(a))) < 1e-6);
    }

    // command-key columns carry gamma per matching attribute; world-world pairs are zero
    const double g = params.gamma_attr;
    if (v == Variant::two_attr) {
      CHECK(m.m(t.token_id("red_circle"), t.token_id("red")) == doctest::Approx(g));
      CHECK(m.m(t.token_id("red_circle"), t.token_id("circle")) == doctest::Approx(g));
      CHECK(m.m(t.token_id("red_circle"), t.token_id("green")) == doctest::Approx(0.0));
      CHECK(m.m(t.token_id("red_circle"), t.token_id("green_square")) == doctest::Approx(0.0));
      CHECK(m.m(t.token_id("empty"), t.token_id("red")) == doctest::Approx(0.0));
    } else {
      CHECK(m.m(t.token_id("2_red_circle"), t.token_id("red")) == doctest::Approx(g));
      // size ramp: monotone in k for "big", reversed for "small"
      const int big = t.token_id("big");
      const int small = t.token_id("small");
      for (int k = 1; k < 4; ++k) {
        const int lo = t.token_id(std::to_string(k) + "_red_circle");
        const int hi = t.token_id(std::to_string(k + 1) + "_red_circle");
        CHECK(m.m(hi, big) > m.m(lo, big));
        CHECK(m.m(hi, small) < m.m(lo, small));
      }
    }
    CHECK(m_column_ordering_holds(m, t, 1.0));
    CHECK(m_size_ramp_holds(m, t, 1.0));
  }

  ConstructionParams rel;
  rel.variant = Variant::three_attr_rel;
  CHECK_THROWS_AS((void)build_construction(rel), contract_violation);
}

TEST_CASE("extract_s: zero output matrix gives zero s; construction gives sigma on command tokens") {
  const EmbeddingTable t = EmbeddingTable::make(Variant::two_attr);
  ModelConfig config;
  config.variant = Variant::two_attr;
  auto w = zero_weights<double>(config, t);
  w.layers[0].heads[0].w_v = MatD::Identity(13, 13);
  CHECK(extract_s(w, t).cwiseAbs().maxCoeff() == 0.0);

  ConstructionParams params;
  params.variant = Variant::two_attr;
  params.sigma = 1.5;
  const auto c = build_construction(params).cast<double>();
  const VecD s = extract_s(c, t);
  for (int id = 0; id < t.vocab_size(); ++id) {
    if (t.is_command_token(id))
      CHECK(s(id) == doctest::Approx(1.5).epsilon(1e-6));
    else
      CHECK(std::abs(s(id)) < 1e-6);
  }
  CHECK(command_s_sign(s, t) == 1.0);
  CHECK(command_s_sign(-s, t) == -1.0);
}

TEST_CASE("decomposition of the worked example: full, partial and no match") {
  ConstructionParams params;
  params.variant = Variant::two_attr;
  const auto w = build_construction(params).cast<double>();
  const EmbeddingTable t = EmbeddingTable::make(Variant::two_attr);
  const Example ex = paper_worked_example();

  const DecompositionReport report = decompose_logits(w, t, ex);
  CHECK(report.predicted == 5);
  CHECK(report.target == 5);
  REQUIRE(report.cells.size() == kGridCells);

  const auto& by_cell = [&](int cell) -> const CellDecomposition& { return report.cells[static_cast<size_t>(cell)]; };
  CHECK(by_cell(5).classification == "full match");
  CHECK(by_cell(5).large_command_summands == 2);
  CHECK(by_cell(9).classification == "partial match");
  CHECK(by_cell(20).classification == "partial match");
  CHECK(by_cell(30).classification == "no match");
  CHECK(by_cell(0).classification == "no match");  // empty cell

  for (const auto& cell : report.cells) {
    CHECK(cell.baseline == doctest::Approx(2.0));
    CHECK(std::abs(cell.total - cell.logit) < 1e-5);
    CHECK(cell.rows.size() == 38);
  }

  const std::string json = report.to_json();
  CHECK(json.find("\"full match\"") != std::string::npos);
}

TEST_CASE("decomposition of a zero-weight model: uniform attention, zero s, baseline logits") {
  const EmbeddingTable t = EmbeddingTable::make(Variant::two_attr);
  ModelConfig config;
  config.variant = Variant::two_attr;
  const auto w = zero_weights<double>(config, t);
  const DecompositionReport report = decompose_logits(w, t, paper_worked_example());
  for (const auto& cell : report.cells) {
    CHECK(cell.logit == doctest::Approx(2.0));
    CHECK(cell.classification == "no match");
    for (const auto& row : cell.rows) {
      CHECK(row.alpha == doctest::Approx(1.0 / 38.0));
      CHECK(row.s == doctest::Approx(0.0));
    }
  }
}

TEST_CASE("decomposition identity holds on random examples for random and constructed models") {
  const EmbeddingTable t = EmbeddingTable::make(Variant::two_attr);
  ModelConfig config;
  config.variant = Variant::two_attr;
  const auto random_model = init_weights<double>(config, t, 99);
  ConstructionParams params;
  params.variant = Variant::two_attr;
  const auto constructed = build_construction(params).cast<double>();

  const auto examples = sample_examples(Variant::two_attr, 100, 123);
  for (const auto& w : {random_model, constructed}) {
    for (const Example& ex : examples) {
      const DecompositionReport report = decompose_logits(w, t, ex);
      for (const auto& cell : report.cells) CHECK(std::abs(cell.total - cell.logit) < 1e-5);
    }
  }

  ModelConfig two_layer = config;
  two_layer.layers = 2;
  CHECK_THROWS_AS((void)decompose_logits(zero_weights<double>(two_layer, t), t, examples[0]), contract_violation);
}

TEST_CASE("three-attr construction separates sizes under the ramp") {
  ConstructionParams params;
  params.variant = Variant::three_attr;
  const auto w = build_construction(params);
  const EmbeddingTable t = EmbeddingTable::make(Variant::three_attr);
  GridWorld world;
  world.variant = Variant::three_attr;
  world.cells[3] = {Color::green, Shape::circle, 2};
  world.cells[10] = {Color::green, Shape::circle, 4};
  world.cells[12] = {Color::red, Shape::square, 1};
  Example ex{world, ThreeAttrCmd{SizeWord::small, Color::green, Shape::circle}, 3, {}};
  ex.tags = tag_splits(ex);
  const VecF logits = forward<float>(w, t, t.encode(ex));
  CHECK(logits(3) > logits(10));
  CHECK(predict_from_logits(std::span<const float>(logits.data(), kGridCells)) == 3);

  Example big = ex;
  big.command = ThreeAttrCmd{SizeWord::big, Color::green, Shape::circle};
  big.target = 10;
  const VecF logits_big = forward<float>(w, t, t.encode(big));
  CHECK(logits_big(10) > logits_big(3));
}

TEST_CASE("construction attains perfect accuracy on small eval suites (both variants, coarse grid)") {
  for (Variant v : {Variant::two_attr, Variant::three_attr}) {
    GenSpec spec = GenSpec::defaults(v, 53);
    spec.test_count = 250;
    const EvalSuite suite = generate_eval_suite(spec);
    const EmbeddingTable t = EmbeddingTable::make(v);

    // the shipped defaults and the nearby grid all separate perfectly
    for (const double gamma_attr : {4.0, 5.0, 8.0}) {
      ConstructionParams params;
      params.variant = v;
      params.gamma_attr = gamma_attr;
      const auto w = build_construction(params);
      const EvalReport random_report = evaluate(w, t, suite.random_test, 2);
      CHECK(random_report.accuracy == doctest::Approx(1.0));
      for (const auto& [tag, list] : suite.split_tests) {
        INFO("variant ", to_string(v), " gamma ", gamma_attr, " split ", to_string(tag));
        CHECK(evaluate(w, t, list, 2).accuracy == doctest::Approx(1.0));
      }
    }
  }
}

TEST_CASE("spearman: perfect, reversed, tied and constant inputs") {
  const std::vector<double> a{1, 2, 3, 4, 5};
  const std::vector<double> b{10, 20, 30, 40, 50};
  CHECK(spearman(a, b) == doctest::Approx(1.0));
  const std::vector<double> r{5, 4, 3, 2, 1};
  CHECK(spearman(a, r) == doctest::Approx(-1.0));
  const std::vector<double> ties{1, 1, 2, 2, 3};
  CHECK(spearman(ties, ties) == doctest::Approx(1.0));
  const std::vector<double> constant{3, 3, 3, 3, 3};
  CHECK(spearman(a, constant) == doctest::Approx(0.0));
}

TEST_CASE("compare: construction against itself is perfect; random init is near chance") {
  const EmbeddingTable t = EmbeddingTable::make(Variant::two_attr);
  ConstructionParams params;
  params.variant = Variant::two_attr;
  const auto c = build_construction(params).cast<double>();
  const auto examples = sample_examples(Variant::two_attr, 400, 321);

  const AgreementReport self = compare_learned_vs_construct(c, c, t, examples);
  CHECK(self.top1_agreement == doctest::Approx(1.0));
  CHECK(self.mean_spearman == doctest::Approx(1.0));
  for (const auto& [token, rho] : self.column_spearman) CHECK(rho == doctest::Approx(1.0));

  ModelConfig config;
  config.variant = Variant::two_attr;
  const auto noise = init_weights<double>(config, t, 5);
  const AgreementReport vs_noise = compare_learned_vs_construct(noise, c, t, examples);
  CHECK(vs_noise.top1_agreement < 0.5);
  CHECK(std::abs(vs_noise.mean_spearman) < 0.5);
}

TEST_CASE("heatmap export: pgm shades, constant matrices, csv round-trip") {
  TempDir tmp;
  MatD m(2, 2);
  m << 0, 1, 1, 0;
  const std::vector<std::string> labels{"a", "b"};

  SUBCASE("pgm maps min to white and max to black") {
    const std::string path = tmp.file("m.pgm");
    export_heatmap(m, labels, labels, path, HeatmapFormat::pgm);
    const std::string bytes = slurp(path);
    REQUIRE(bytes.substr(0, 3) == "P5\n");
    const std::string pixels = bytes.substr(bytes.size() - 4);
    CHECK(static_cast<unsigned char>(pixels[0]) == 255);
    CHECK(static_cast<unsigned char>(pixels[1]) == 0);
    CHECK(static_cast<unsigned char>(pixels[2]) == 0);
    CHECK(static_cast<unsigned char>(pixels[3]) == 255);
  }

  SUBCASE("constant matrix maps to mid gray") {
    const std::string path = tmp.file("const.pgm");
    export_heatmap(MatD::Constant(3, 3, 7.5), {"x", "y", "z"}, {"x", "y", "z"}, path, HeatmapFormat::pgm);
    const std::string bytes = slurp(path);
    for (size_t i = bytes.size() - 9; i < bytes.size(); ++i) CHECK(static_cast<unsigned char>(bytes[i]) == 128);
  }

  SUBCASE("csv re-parses to 6 significant digits") {
    MatD vals(2, 2);
    vals << 1.234567891, -22.9876543, 3.5e-7, 1234567.89;
    const std::string path = tmp.file("m.csv");
    export_heatmap(vals, labels, labels, path, HeatmapFormat::csv);
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header == ",a,b");
    for (int r = 0; r < 2; ++r) {
      std::string line;
      std::getline(in, line);
      size_t at = line.find(',');
      std::string rest = line.substr(at + 1);
      for (int c = 0; c < 2; ++c) {
        const size_t comma = rest.find(',');
        const std::string tok = rest.substr(0, comma);
        const double parsed = std::stod(tok);
        const double expect = vals(r, c);
        CHECK(std::abs(parsed - expect) <= 5e-6 * std::abs(expect));
        if (comma != std::string::npos) rest = rest.substr(comma + 1);
      }
    }
  }

  SUBCASE("svg is produced and self-contained") {
    const std::string path = tmp.file("m.svg");
    export_heatmap(m, labels, labels, path, HeatmapFormat::svg);
    const std::string svg = slurp(path);
    CHECK(svg.find("<svg") != std::string::npos);
    CHECK(svg.find("href") == std::string::npos);
  }
}

TEST_CASE("sign-normalized column ordering: a globally negated model still passes") {
  ConstructionParams params;
  params.variant = Variant::two_attr;
  auto w = build_construction(params).cast<double>();
  const EmbeddingTable t = EmbeddingTable::make(Variant::two_attr);

  // flip the value/output sign: s becomes negative, M reading flips jointly
  w.layers[0].w_o = -w.layers[0].w_o;
  w.layers[0].heads[0].w_q = -w.layers[0].heads[0].w_q;
  const VecD s = extract_s(w, t);
  const double sign = command_s_sign(s, t);
  CHECK(sign == -1.0);
  const VocabMatrix m = extract_M(w, t);
  CHECK(!m_column_ordering_holds(m, t, 1.0));
  CHECK(m_column_ordering_holds(m, t, sign));
}
