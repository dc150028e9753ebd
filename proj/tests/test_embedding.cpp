#include <redmix/embedding.hpp>

#include <Eigen/Core>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <doctest.h>

#include <redmix/toy_corpus.hpp>

using namespace redmix;
namespace fs = std::filesystem;

namespace {

EmbeddingTable tiny_table() {
  EmbeddingTable t;
  t.vocab = {"a", "b", "c"};
  t.matrix.resize(3, 2);
  t.matrix << 1.0, 0.0,
              0.0, 1.0,
              1.0, 1.0;
  return t;
}

fs::path fresh_dir(const char* tag) {
  const fs::path p =
      fs::temp_directory_path() / (std::string("redmix-emb-") + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_SUITE("embedding") {

TEST_CASE("one_hot_selection places single ones") {
  const EmbeddingTable t = tiny_table();

  SelectionMatrix s = one_hot_selection(TokenSequence{{1}}, t);
  REQUIRE(s.rows.rows() == 1);
  REQUIRE(s.rows.cols() == 3);
  CHECK(s.one_hot);
  CHECK(s.rows(0, 0) == 0.0);
  CHECK(s.rows(0, 1) == 1.0);
  CHECK(s.rows(0, 2) == 0.0);

  SelectionMatrix s2 = one_hot_selection(TokenSequence{{0, 2}}, t);
  REQUIRE(s2.rows.rows() == 2);
  CHECK(s2.rows(0, 0) == 1.0);
  CHECK(s2.rows(0, 1) == 0.0);
  CHECK(s2.rows(1, 2) == 1.0);
  CHECK(s2.rows.sum() == 2.0);

  CHECK_THROWS_AS(one_hot_selection(TokenSequence{{3}}, t),
                  std::invalid_argument);
  CHECK_THROWS_AS(one_hot_selection(TokenSequence{{-1}}, t),
                  std::invalid_argument);
}

TEST_CASE("encode reproduces rows and blends soft selections") {
  const EmbeddingTable t = tiny_table();

  // Identity selection returns the table itself.
  SelectionMatrix id;
  id.rows = Eigen::MatrixXd::Identity(3, 3);
  CHECK((encode(id, t) - t.matrix).cwiseAbs().maxCoeff() == 0.0);

  // One-hot row k returns row k of E.
  SelectionMatrix s = one_hot_selection(TokenSequence{{2}}, t);
  CHECK((encode(s, t) - t.matrix.row(2)).cwiseAbs().maxCoeff() == 0.0);

  // Soft blend: [0.5, 0.5] over a 2x2 diagonal table gives the average.
  EmbeddingTable diag;
  diag.vocab = {"x", "y"};
  diag.matrix.resize(2, 2);
  diag.matrix << 2.0, 0.0,
                 0.0, 2.0;
  SelectionMatrix soft;
  soft.rows.resize(1, 2);
  soft.rows << 0.5, 0.5;
  const Eigen::MatrixXd e = encode(soft, diag);
  CHECK(e(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(e(0, 1) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("encode is linear in the selection") {
  const EmbeddingTable t = make_toy_table(3);
  Prng rng(8);
  SelectionMatrix a, b;
  a.rows.resize(4, t.vocab_size());
  b.rows.resize(4, t.vocab_size());
  for (Eigen::Index i = 0; i < a.rows.size(); ++i) {
    a.rows.data()[i] = rng.normal();
    b.rows.data()[i] = rng.normal();
  }
  SelectionMatrix sum;
  sum.rows = 0.3 * a.rows + 0.7 * b.rows;
  const Eigen::MatrixXd lhs = encode(sum, t);
  const Eigen::MatrixXd rhs = 0.3 * encode(a, t) + 0.7 * encode(b, t);
  CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("cosine_loss hand values") {
  Eigen::VectorXd e1(2), e2(2), neg(2), orth(2);
  e1 << 1, 0;
  e2 << 1, 0;
  neg << -1, 0;
  orth << 0, 1;
  CHECK(cosine_loss(e1, e2) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(cosine_loss(e1, neg) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(cosine_loss(e1, orth) == doctest::Approx(1.0).epsilon(1e-15));
  Eigen::VectorXd zero = Eigen::VectorXd::Zero(2);
  CHECK_THROWS_AS(cosine_loss(zero, e1), std::domain_error);
  CHECK_THROWS_AS(cosine_loss(e1, zero), std::domain_error);
}

TEST_CASE("cosine_loss is invariant to positive rescaling") {
  Prng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::VectorXd x(6), y(6);
    for (int i = 0; i < 6; ++i) {
      x[i] = rng.normal();
      y[i] = rng.normal();
    }
    const double base = cosine_loss(x, y);
    CHECK(cosine_loss(3.7 * x, y) == doctest::Approx(base).epsilon(1e-12));
    CHECK(cosine_loss(x, 0.002 * y) == doctest::Approx(base).epsilon(1e-12));
  }
}

TEST_CASE("cosine_loss_grad hand values") {
  Eigen::VectorXd x(2), y(2);
  x << 1, 0;
  y << 1, 0;
  const Eigen::VectorXd g0 = cosine_loss_grad(x, y);
  CHECK(g0.norm() == doctest::Approx(0.0).epsilon(1e-15));

  y << 0, 1;
  const Eigen::VectorXd g1 = cosine_loss_grad(x, y);
  CHECK(g1[0] == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(g1[1] == doctest::Approx(-1.0).epsilon(1e-15));
}

TEST_CASE("cosine_loss_grad matches central differences") {
  // 100 seeds, dimensions 2 through 64, finite differences as the oracle.
  for (int seed = 0; seed < 100; ++seed) {
    Prng rng(1000 + seed);
    const int d = 2 + static_cast<int>(rng.below(63));
    Eigen::VectorXd x(d), y(d);
    for (int i = 0; i < d; ++i) {
      x[i] = rng.normal();
      y[i] = rng.normal();
    }
    if (x.norm() < 1e-6 || y.norm() < 1e-6) continue;
    const Eigen::VectorXd g = cosine_loss_grad(x, y);
    const double h = 1e-6;
    for (int i = 0; i < d; ++i) {
      Eigen::VectorXd xp = x, xm = x;
      xp[i] += h;
      xm[i] -= h;
      const double fd = (cosine_loss(xp, y) - cosine_loss(xm, y)) / (2 * h);
      CHECK(std::abs(g[i] - fd) < 1e-4);
    }
  }
}

TEST_CASE("project_to_tokens argmax and tie-breaking") {
  const EmbeddingTable t = tiny_table();
  SelectionMatrix s;
  s.rows.resize(2, 3);
  s.rows << 0.1, 0.9, 0.0,
            0.5, 0.5, 0.0;  // tie resolves to the lowest index
  const TokenSequence p = project_to_tokens(s);
  REQUIRE(p.length() == 2);
  CHECK(p.indices[0] == 1);
  CHECK(p.indices[1] == 0);
}

TEST_CASE("projection round-trips one-hot selections") {
  const EmbeddingTable t = make_toy_table(1);
  Prng rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    TokenSequence p;
    const int len = 1 + static_cast<int>(rng.below(6));
    for (int i = 0; i < len; ++i)
      p.indices.push_back(
          static_cast<Eigen::Index>(rng.below(t.vocab_size())));
    CHECK(project_to_tokens(one_hot_selection(p, t)) == p);
  }
}

TEST_CASE("gumbel projection at tiny temperature matches argmax") {
  const EmbeddingTable t = tiny_table();
  Prng sel_rng(50), noise_rng(51);
  int disagree = 0;
  const int n = 10000;
  for (int trial = 0; trial < n; ++trial) {
    SelectionMatrix s;
    s.rows.resize(1, 3);
    for (int j = 0; j < 3; ++j) s.rows(0, j) = sel_rng.normal();
    const TokenSequence hard = project_to_tokens(s);
    const TokenSequence noisy =
        project_to_tokens(s, ProjectionMode::kGumbel, noise_rng, 1e-3);
    disagree += (hard == noisy) ? 0 : 1;
  }
  CHECK(disagree < n / 100);
}

TEST_CASE("table save/load round trip and checksum") {
  const fs::path dir = fresh_dir("roundtrip");
  const EmbeddingTable t = make_toy_table(9);
  save_embedding_table(t, dir / "e.txt");
  const EmbeddingTable back = load_embedding_table(dir / "e.txt");
  REQUIRE(back.vocab == t.vocab);
  CHECK((back.matrix - t.matrix).cwiseAbs().maxCoeff() == 0.0);
  CHECK(back.checksum() == t.checksum());

  EmbeddingTable bumped = t;
  bumped.matrix(0, 0) += 1e-9;
  CHECK(bumped.checksum() != t.checksum());
}

TEST_CASE("table validation rejects malformed tables") {
  EmbeddingTable dup = tiny_table();
  dup.vocab[2] = "a";
  CHECK_THROWS_AS(dup.validate(), std::invalid_argument);

  EmbeddingTable zero_row = tiny_table();
  zero_row.matrix.row(1).setZero();
  CHECK_THROWS_AS(zero_row.validate(), std::invalid_argument);

  EmbeddingTable tiny;
  tiny.vocab = {"only"};
  tiny.matrix = Eigen::MatrixXd::Ones(1, 2);
  CHECK_THROWS_AS(tiny.validate(), std::invalid_argument);

  EmbeddingTable nan_entry = tiny_table();
  nan_entry.matrix(0, 1) = std::nan("");
  CHECK_THROWS_AS(nan_entry.validate(), std::invalid_argument);
}

TEST_CASE("blocklist and prompt loaders") {
  const fs::path dir = fresh_dir("loaders");
  {
    std::ofstream out(dir / "block.txt");
    out << "# comment line\n\nforbidden\nnude  \n";
  }
  const auto block = load_blocklist(dir / "block.txt");
  CHECK(block.size() == 2);
  CHECK(block.count("forbidden") == 1);
  CHECK(block.count("nude") == 1);

  const EmbeddingTable t = tiny_table();
  {
    std::ofstream out(dir / "p.txt");
    out << "a c b\n";
  }
  const TokenSequence p = load_prompt(dir / "p.txt", t);
  CHECK(p.indices == std::vector<Eigen::Index>{0, 2, 1});

  {
    std::ofstream out(dir / "bad.txt");
    out << "a missing\n";
  }
  CHECK_THROWS_WITH_AS(load_prompt(dir / "bad.txt", t),
                       doctest::Contains("missing"), std::invalid_argument);

  CHECK_THROWS_AS(load_embedding_table(dir / "absent.txt"),
                  std::runtime_error);
}

TEST_CASE("flatten is row-major") {
  Eigen::MatrixXd m(2, 3);
  m << 1, 2, 3,
       4, 5, 6;
  const Eigen::VectorXd v = flatten(m);
  REQUIRE(v.size() == 6);
  for (int i = 0; i < 6; ++i) CHECK(v[i] == double(i + 1));
}

}  // TEST_SUITE
