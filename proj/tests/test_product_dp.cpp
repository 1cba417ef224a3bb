#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "debias/functionals.hpp"
#include "debias/product_dp.hpp"
#include "support.hpp"

using namespace debias;

namespace {

using MatList = std::vector<Eigen::MatrixXd>;

MatList random_mats(int n, Index m, testing::Rng& rng) {
  MatList out;
  for (int i = 0; i < n; ++i) out.push_back(testing::random_matrix(m, rng));
  return out;
}

/// Sum over increasing k-tuples of v0 H_t1 G_1 ... H_tk G_k over the first `prefix` increments.
Eigen::MatrixXd chain_oracle(const Eigen::MatrixXd& v0, const MatList& g, const MatList& h,
                             int k, Index prefix) {
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(v0.rows(), v0.cols());
  if (k > prefix) return acc;
  for_each_combination(prefix, k, [&](std::span<const Index> idx) {
    Eigen::MatrixXd c = v0;
    for (int s = 0; s < k; ++s) c = c * h[static_cast<std::size_t>(idx[s])] * g[static_cast<std::size_t>(s) + 1];
    acc += c;
  });
  return acc;
}

std::vector<ElementD> spd_sample(int n, Index d, testing::Rng& rng) {
  std::vector<ElementD> out;
  for (int i = 0; i < n; ++i) out.push_back(ElementD::dense(testing::random_spd(d, rng)));
  return out;
}

PilotFn<double> sample_mean() {
  return [](std::span<const ElementD> s) { return mean_element(s); };
}

}  // namespace

TEST_CASE("dp_chain examples") {
  const MatList ones(4, Eigen::MatrixXd::Ones(1, 1));
  MatList h;
  for (double v : {2.0, 3.0, 5.0}) h.push_back(Eigen::MatrixXd::Constant(1, 1, v));
  const Eigen::MatrixXd v0 = Eigen::MatrixXd::Ones(1, 1);
  CHECK(dp_chain<double>(v0, ones, h, 2)(0, 0) == doctest::Approx(2 * 3 + 2 * 5 + 3 * 5));

  testing::Rng rng(1);
  const auto g = random_mats(4, 2, rng), hs = random_mats(5, 2, rng);
  const Eigen::MatrixXd seed = testing::random_matrix(2, rng);
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(2, 2);
  for (const auto& m : hs) sum += m;
  CHECK((dp_chain<double>(seed, g, hs, 1) - seed * sum * g[1]).norm() < 1e-12);

  const Eigen::MatrixXd got = dp_chain<double>(seed, g, hs, 3);
  const Eigen::MatrixXd want = chain_oracle(seed, g, hs, 3, 5);
  CHECK((got - want).norm() <= 1e-10 * want.norm());

  CHECK_THROWS_AS(dp_chain<double>(seed, g, hs, 6), Error);
  const MatList wrong = random_mats(5, 3, rng);
  CHECK_THROWS_AS(dp_chain<double>(seed, g, wrong, 2), Error);
}

TEST_CASE("dp loop invariant holds at every prefix") {
  testing::Rng rng(2);
  const int k = 3;
  const auto g = random_mats(k + 1, 2, rng), h = random_mats(6, 2, rng);
  const Eigen::MatrixXd v0 = testing::random_matrix(2, rng);
  for (Index t = k; t <= 6; ++t) {
    const MatList prefix(h.begin(), h.begin() + t);
    const auto state = dp_state<double>(v0, g, prefix, k);
    for (int j = 1; j <= k; ++j) {
      const Eigen::MatrixXd want = chain_oracle(v0, g, h, j, t);
      CHECK((state.y[j] - want).norm() <= 1e-10 * std::max(1.0, want.norm()));
    }
  }
}

TEST_CASE("fk_pi agrees with the brute-force oracle") {
  testing::Rng rng(3);
  const Index d = 3;
  const auto fw = build_precision<double>({testing::random_vector(d, rng), testing::random_vector(d, rng)});
  const auto x = ElementD::dense(testing::random_spd(d, rng));
  std::vector<ElementD> inc;
  for (int i = 0; i < 6; ++i) inc.push_back(testing::random_dense(d, rng));

  const double dp = fk_pi<double>(fw.structure, x, inc, {}, 2);
  const double brute = fk_bruteforce<double>(fw.structure, x, inc, {}, 2);
  CHECK(testing::rel_err(dp, brute) < 1e-10);

  const std::vector<Index> perm = {3, 0, 5, 1, 4, 2};
  CHECK(testing::rel_err(fk_pi<double>(fw.structure, x, inc, perm, 3),
                         fk_bruteforce<double>(fw.structure, x, inc, perm, 3)) < 1e-10);

  const std::vector<ElementD> zeros(4, ElementD::zero(ElementKind::DenseMatrix, d));
  CHECK(fk_pi<double>(fw.structure, x, zeros, {}, 2) == 0.0);
  CHECK(fk_bruteforce<double>(fw.structure, x, zeros, {}, 2) == 0.0);

  // Order one is the average of Lambda_1(G_0 H_i G_1).
  const auto term = fw.structure.term(x, 1);
  double avg = 0;
  for (const auto& h : inc) avg += term.apply(term.factors[0] * h.matrix() * term.factors[1]);
  avg /= 6.0;
  CHECK(testing::rel_err(fk_bruteforce<double>(fw.structure, x, inc, {}, 1), avg) < 1e-12);
  CHECK(testing::rel_err(fk_pi<double>(fw.structure, x, inc, perm, 1), avg) < 1e-12);

  CHECK_THROWS_AS(fk_pi<double>(fw.structure, x, inc, {}, 9), Error);
}

TEST_CASE("fk_pi on every functional, small instances") {
  testing::Rng rng(4);
  const Index d = 2;
  const std::vector<FamilyWithStructure<double>> fws = {
      build_precision<double>({testing::random_vector(d, rng), testing::random_vector(d, rng)}),
      build_regression<double>({testing::random_vector(d, rng)}),
      build_logdet<double>(d),
      build_stieltjes<double>({testing::random_symmetric(d, rng), -0.7}),
  };
  for (const auto& fw : fws) {
    const bool pair = fw.structure.kind == ElementKind::MomentPair;
    const auto x = pair ? ElementD::pair(testing::random_spd(d, rng), testing::random_vector(d, rng))
                        : ElementD::dense(testing::random_spd(d, rng));
    for (int n = 4; n <= 7; ++n) {
      std::vector<ElementD> inc;
      for (int i = 0; i < n; ++i)
        inc.push_back(pair ? testing::random_pair(d, rng) : testing::random_dense(d, rng));
      auto perm = random_permutation(n, rng);
      for (int k = 1; k <= 4; ++k)
        CHECK(testing::rel_err(fk_pi<double>(fw.structure, x, inc, perm, k),
                               fk_bruteforce<double>(fw.structure, x, inc, perm, k)) < 1e-10);
    }
  }
}

TEST_CASE("permutation average equals the scaled U-statistic") {
  testing::Rng rng(5);
  const Index d = 3;
  const auto fw = build_precision<double>({testing::random_vector(d, rng), testing::random_vector(d, rng)});
  const auto x = ElementD::dense(testing::random_spd(d, rng));
  const auto sample = spd_sample(4, d, rng);
  const auto pilot = ElementD::dense(testing::random_spd(d, rng));
  const double scale = std::abs(complete_ustat<double>(fw.family.derivative(x, 2), sample, pilot)) / 2.0;
  CHECK(permutation_average_gap<double>(fw.structure, x, sample, pilot, 2, fw.family) <=
        1e-10 * std::max(1.0, scale));
  CHECK(permutation_average_gap<double>(fw.structure, x, sample, pilot, 1, fw.family) < 1e-12);

  const std::vector<ElementD> flat(4, pilot);
  CHECK(permutation_average_gap<double>(fw.structure, x, flat, pilot, 2, fw.family) == 0.0);

  const auto big = spd_sample(7, d, rng);
  CHECK_THROWS_AS(permutation_average_gap<double>(fw.structure, x, big, pilot, 2, fw.family), Error);
}

TEST_CASE("pre_one_sided reduces to one_sided where it should") {
  testing::Rng rng(6);
  const Index d = 3;
  const auto fw = build_precision<double>({testing::random_vector(d, rng), testing::random_vector(d, rng)});
  const auto sample = spd_sample(4, d, rng);
  const auto pilot = ElementD::dense(testing::random_spd(d, rng));

  PermutationPlan plan;
  plan.seed = 99;
  const auto exact1 = one_sided<double>(fw.family, pilot, sample, 1);
  CHECK(pre_one_sided<double>(fw.family, fw.structure, pilot, sample, 1, plan).value == exact1.value);

  plan.exhaustive = true;
  const auto exact2 = one_sided<double>(fw.family, pilot, sample, 2);
  const auto pre2 = pre_one_sided<double>(fw.family, fw.structure, pilot, sample, 2, plan);
  CHECK(testing::rel_err(pre2.value, exact2.value) < 1e-10);
  CHECK(pre2.per_order_terms.size() == 3);

  const std::vector<ElementD> flat(5, pilot);
  plan.exhaustive = false;
  CHECK(pre_one_sided<double>(fw.family, fw.structure, pilot, flat, 3, plan).value ==
        doctest::Approx(fw.family.value(pilot)).epsilon(1e-14));

  const auto bad = ElementD::dense(Eigen::Vector3d(1, 1, 0).asDiagonal());
  CHECK_THROWS_AS(pre_one_sided<double>(fw.family, fw.structure, bad, sample, 2, plan), Error);
  auto narrow = fw.structure;
  narrow.max_order = 2;
  try {
    pre_one_sided<double>(fw.family, narrow, pilot, sample, 3, plan);
    FAIL("uncovered order accepted");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::OrderNotCovered);
  }
}

TEST_CASE("pre_cross_fit") {
  testing::Rng rng(7);
  const Index d = 2;
  const auto fw = build_regression<double>({testing::random_vector(d, rng)});
  std::vector<ElementD> a, b;
  for (int i = 0; i < 4; ++i) {
    a.push_back(ElementD::pair(testing::random_spd(d, rng), testing::random_vector(d, rng)));
    b.push_back(ElementD::pair(testing::random_spd(d, rng), testing::random_vector(d, rng)));
  }
  PermutationPlan plan;
  plan.exhaustive = true;
  const auto pre = pre_cross_fit<double>(fw.family, fw.structure, sample_mean(), a, b,
                                         OrderSchedule::fixed(2), plan);
  const auto exact = cross_fit<double>(fw.family, sample_mean(), a, b, OrderSchedule::fixed(2));
  CHECK(testing::rel_err(pre.value, exact.value) < 1e-10);

  plan.exhaustive = false;
  plan.seed = 1234;
  const auto r1 = pre_cross_fit<double>(fw.family, fw.structure, sample_mean(), a, b,
                                        OrderSchedule::fixed(3), plan);
  const auto r2 = pre_cross_fit<double>(fw.family, fw.structure, sample_mean(), a, b,
                                        OrderSchedule::fixed(3), plan);
  CHECK(r1.value == r2.value);
  CHECK(r1.value == doctest::Approx((r1.side_a.value + r1.side_b.value) / 2));

  const auto same = pre_cross_fit<double>(fw.family, fw.structure, sample_mean(), a, a,
                                          OrderSchedule::fixed(2), plan);
  CHECK(same.side_a.value == same.side_b.value);
  CHECK(same.value == same.side_a.value);

  const std::vector<ElementD> short_b(b.begin(), b.begin() + 3);
  CHECK_THROWS_AS(pre_cross_fit<double>(fw.family, fw.structure, sample_mean(), a, short_b,
                                        OrderSchedule::fixed(2), plan),
                  Error);
}

TEST_CASE("permutation streams") {
  PermutationPlan plan;
  plan.seed = 5;
  const auto p = plan_permutation(plan, 10, 2, 0);
  CHECK(p == plan_permutation(plan, 10, 2, 0));
  CHECK(p != plan_permutation(plan, 10, 3, 0));
  CHECK(p != plan_permutation(plan, 10, 2, 1));
  auto sorted = p;
  std::sort(sorted.begin(), sorted.end());
  for (Index i = 0; i < 10; ++i) CHECK(sorted[static_cast<std::size_t>(i)] == i);
  plan.reuse_across_orders = true;
  CHECK(plan_permutation(plan, 10, 2, 0) == plan_permutation(plan, 10, 3, 0));
}

TEST_CASE("multiplication count scales as b n s^2") {
  testing::Rng rng(8);
  const Index d = 2;
  const auto fw = build_precision<double>({testing::random_vector(d, rng), testing::random_vector(d, rng)});
  const auto pilot = ElementD::dense(testing::random_spd(d, rng));
  const auto count = [&](int n, int s, int b) {
    const auto sample = spd_sample(n, d, rng);
    PermutationPlan plan;
    plan.b = b;
    OpCounter counter;
    pre_one_sided<double>(fw.family, fw.structure, pilot, sample, s, plan, &counter);
    return static_cast<double>(counter.multiplications);
  };
  const double base = count(200, 4, 1);
  const double n_ratio = count(400, 4, 1) / base;
  CHECK(n_ratio >= 2.0 / 1.2);
  CHECK(n_ratio <= 2.0 * 1.2);
  CHECK(count(200, 4, 3) / base == doctest::Approx(3.0));
  const double s_ratio = count(200, 8, 1) / base;
  CHECK(s_ratio >= 4.0 / 1.3);
  CHECK(s_ratio <= 4.0 * 1.3);
}
