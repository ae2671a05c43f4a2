#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "fedcausal/datagen.hpp"
#include "fedcausal/dataset.hpp"
#include "fedcausal/rng.hpp"

using namespace fedcausal;

namespace {

std::string temp_file(const std::string& name) {
  return std::string("/tmp/fedcausal_test_") + name;
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  out << content;
}

}  // namespace

TEST_CASE("load_csv: three rows, no confounder columns") {
  const std::string path = temp_file("basic.csv");
  write_file(path,
             "w,y,x0,x1\n"
             "0,1.5,0.1,-0.2\n"
             "1,2.5,0.3,0.4\n"
             "0,0.5,-0.1,0.0\n");
  const SourceDataset ds = load_csv(path);
  CHECK(ds.size() == 3);
  CHECK(ds.dim_x() == 2);
  CHECK(ds.dim_u() == 0);
  CHECK(ds.record(1).w == 1);
  CHECK(ds.record(2).y == doctest::Approx(0.5));
}

TEST_CASE("load_csv: invalid treatment rejected") {
  const std::string path = temp_file("badw.csv");
  write_file(path, "w,y,x0\n2,1.0,0.0\n");
  CHECK_THROWS_AS(load_csv(path), SchemaError);
}

TEST_CASE("load_csv: malformed row reports line number") {
  const std::string path = temp_file("badrow.csv");
  write_file(path, "w,y,x0\n0,1.0,0.0\n1,oops,0.0\n");
  try {
    load_csv(path);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
}

TEST_CASE("load_csv: mask derived from emptiness without r columns") {
  const std::string path = temp_file("mask.csv");
  write_file(path,
             "w,y,x0,u0,u1\n"
             "0,1.0,0.5,,2.0\n"
             "1,2.0,0.5,3.0,\n");
  const SourceDataset ds = load_csv(path);
  CHECK(ds.record(0).r == std::vector<int>{0, 1});
  CHECK(ds.record(1).r == std::vector<int>{1, 0});
  CHECK(!ds.record(0).u(0).has_value());
  CHECK(ds.record(0).u(1).value() == doctest::Approx(2.0));
}

TEST_CASE("load_csv: observed-but-empty confounder cell is an error") {
  const std::string path = temp_file("maskerr.csv");
  write_file(path, "w,y,x0,u0,r0\n0,1.0,0.5,,1\n");
  CHECK_THROWS_AS(load_csv(path), ParseError);
}

TEST_CASE("csv round-trip through the causalfi generator") {
  DgpConfig cfg;
  cfg.family = "causalfi";
  cfg.n_per_source = 25;
  cfg.sources = 2;
  cfg.d_x = 3;
  cfg.d_u = 2;
  cfg.seed = 11;
  const GeneratedData gen = gen_causalfi(cfg);
  const std::string path = temp_file("roundtrip.csv");
  write_csv(gen.data[0], path);
  const SourceDataset back = load_csv(path);
  REQUIRE(back.size() == gen.data[0].size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    const Record& a = gen.data[0].record(i);
    const Record& b = back.record(i);
    CHECK(a.w == b.w);
    CHECK(a.y == b.y);  // exact: %.17g survives the round trip
    CHECK(a.x == b.x);
    CHECK(a.r == b.r);
    for (std::size_t j = 0; j < a.r.size(); ++j)
      if (a.r[j] == 1) CHECK(a.u_raw[j] == b.u_raw[j]);
  }
}

TEST_CASE("masked accessor never exposes unobserved entries") {
  Record rec;
  rec.w = 0;
  rec.y = 1.0;
  rec.u_raw = {1.0, 2.0};
  rec.r = {1, 0};
  CHECK(rec.u(0).has_value());
  CHECK(!rec.u(1).has_value());
}

TEST_CASE("compute_moments: degenerate and simple cases") {
  std::vector<Record> recs;
  for (int i = 0; i < 4; ++i) {
    Record r;
    r.w = i % 2;
    r.y = 1.0;
    r.x = {3.0};  // identical covariate values
    recs.push_back(r);
  }
  const SourceDataset ds(1, recs);
  const SourceMoments m = compute_moments(ds);
  CHECK(m.x_tilde[0] == doctest::Approx(3.0));
  CHECK(m.x_tilde[1] == doctest::Approx(0.0));
  CHECK(m.x_tilde[2] == 0.0);  // skewness defined as 0 by convention
  CHECK(m.x_tilde[3] == 0.0);  // kurtosis likewise

  const auto two = four_moments({-1.0, 1.0});
  CHECK(two[0] == doctest::Approx(0.0));
  CHECK(two[1] == doctest::Approx(1.0));
}

TEST_CASE("compute_moments: monte-carlo oracle on standard normal draws") {
  Rng rng(123);
  std::vector<double> draws(10000);
  for (auto& v : draws) v = rng.normal();
  const auto m = four_moments(draws);
  CHECK(std::abs(m[0]) < 0.05);
  CHECK(m[1] > 0.9);
  CHECK(m[1] < 1.1);
  CHECK(m[3] > 2.7);
  CHECK(m[3] < 3.3);
}

TEST_CASE("compute_moments: empty arm falls back to pooled moments") {
  std::vector<Record> recs;
  for (int i = 0; i < 6; ++i) {
    Record r;
    r.w = 0;  // nobody treated
    r.y = static_cast<double>(i);
    r.x = {0.0};
    recs.push_back(r);
  }
  const SourceMoments m = compute_moments(SourceDataset(1, recs));
  CHECK(m.y1_tilde == m.y0_tilde);
  CHECK_THROWS_AS(compute_moments(SourceDataset(1, {})), SchemaError);
}

TEST_CASE("compute_moments is permutation-invariant") {
  Rng rng(5);
  std::vector<Record> recs;
  for (int i = 0; i < 30; ++i) {
    Record r;
    r.w = rng.bernoulli(0.5);
    r.y = rng.normal();
    r.x = {rng.normal(), rng.uniform(-1, 1)};
    recs.push_back(r);
  }
  auto shuffled = recs;
  rng.shuffle(shuffled);
  const SourceMoments a = compute_moments(SourceDataset(1, recs));
  const SourceMoments b = compute_moments(SourceDataset(1, shuffled));
  for (std::size_t i = 0; i < a.x_tilde.size(); ++i)
    CHECK(a.x_tilde[i] == doctest::Approx(b.x_tilde[i]).epsilon(1e-9));
  for (int i = 0; i < 4; ++i) {
    CHECK(a.y0_tilde[i] == doctest::Approx(b.y0_tilde[i]).epsilon(1e-9));
    CHECK(a.w_tilde[i] == doctest::Approx(b.w_tilde[i]).epsilon(1e-9));
  }
}

TEST_CASE("split: reproduces the 50/450/400 policy") {
  std::vector<Record> recs(1000);
  for (auto& r : recs) r.x = {0.0};
  const SourceDataset ds(1, recs);
  const DatasetSplit sp = split(ds, 0.05, 0.45, 0.40, 9);
  CHECK(sp.train.size() == 50);
  CHECK(sp.test.size() == 450);
  CHECK(sp.validation.size() == 400);
}

TEST_CASE("split: full-train, determinism, disjointness, leftover-to-test") {
  std::vector<Record> recs(103);
  for (auto& r : recs) r.x = {0.0};
  const SourceDataset ds(1, recs);

  const DatasetSplit all = split(ds, 1.0, 0.0, 0.0, 3);
  CHECK(all.train.size() == 103);

  const DatasetSplit a = split(ds, 0.3, 0.3, 0.2, 42);
  const DatasetSplit b = split(ds, 0.3, 0.3, 0.2, 42);
  CHECK(a.train == b.train);
  CHECK(a.test == b.test);
  CHECK(a.validation == b.validation);

  std::vector<bool> seen(ds.size(), false);
  for (const auto* part : {&a.train, &a.test, &a.validation})
    for (std::size_t idx : *part) {
      CHECK(!seen[idx]);
      seen[idx] = true;
    }

  // Fractions summing to 1: the rounding leftover lands in test.
  const DatasetSplit c = split(ds, 0.5, 0.5, 0.0, 1);
  CHECK(c.train.size() == 51);
  CHECK(c.test.size() == 52);

  CHECK_THROWS_AS(split(ds, -0.1, 0.5, 0.0, 1), ConfigError);
  CHECK_THROWS_AS(split(ds, 0.9, 0.9, 0.0, 1), ConfigError);
}
