#include <catch2/catch_amalgamated.hpp>

#include "cares/session_encoder.hpp"
#include "support/dense_reference.hpp"
#include "support/graph_oracle.hpp"

using namespace cares;
using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

ModelParams<double> make_params(int d, int items, int cats, int t_max,
                                uint64_t seed) {
  ModelParams<double> p;
  p.dims = ModelDims{d, items, cats, 3, 1, t_max};
  p.init(seed);
  return p;
}

Tensor<double> random_tensor(Rng& rng, long r, long c, double scale = 1.0) {
  Tensor<double> t(r, c);
  for (auto& x : t.data) x = rng.next_uniform(scale);
  return t;
}

}  // namespace

TEST_CASE("positional fuse adds reverse position and length rows") {
  auto params = make_params(3, 4, 2, 10, 1);

  // zero tables: identity
  params.pos_table.fill(0);
  params.len_table.fill(0);
  Tape<double> t0;
  Tensor<double> items(2, 3);
  items.at(0, 0) = 1;
  items.at(1, 1) = 2;
  auto z = enc::positional_fuse(t0, t0.constant(items),
                                t0.param(params.pos_table),
                                t0.param(params.len_table));
  for (long r = 0; r < 2; ++r)
    for (long c = 0; c < 3; ++c) CHECK(t0.value(z).at(r, c) == items.at(r, c));

  // t = 1: row 0 of positions, length row for t=1
  params.init(2);
  Tape<double> t1;
  Tensor<double> one(1, 3);
  one.at(0, 2) = 5.0;
  auto z1 = enc::positional_fuse(t1, t1.constant(one),
                                 t1.param(params.pos_table),
                                 t1.param(params.len_table));
  for (long c = 0; c < 3; ++c)
    CHECK(t1.value(z1).at(0, c) ==
          Catch::Approx(one.at(0, c) + params.pos_table.at(0, c) +
                        params.len_table.at(0, c)).margin(1e-15));

  // t = 3: first item reads position row 2, the last row 0
  Tape<double> t3;
  Tensor<double> three(3, 3);
  auto z3 = enc::positional_fuse(t3, t3.constant(three),
                                 t3.param(params.pos_table),
                                 t3.param(params.len_table));
  for (long c = 0; c < 3; ++c) {
    CHECK(t3.value(z3).at(0, c) ==
          Catch::Approx(params.pos_table.at(2, c) + params.len_table.at(2, c))
              .margin(1e-15));
    CHECK(t3.value(z3).at(2, c) ==
          Catch::Approx(params.pos_table.at(0, c) + params.len_table.at(2, c))
              .margin(1e-15));
  }

  // beyond t_max is fatal
  Tape<double> tx;
  Tensor<double> big(11, 3);
  CHECK_THROWS_AS(
      enc::positional_fuse(tx, tx.constant(big), tx.param(params.pos_table),
                           tx.param(params.len_table)),
      cares::InternalError);
}

TEST_CASE("category context is the occurrence mean") {
  auto params = make_params(3, 4, 3, 10, 3);
  Tape<double> t;
  auto table = t.param(params.category_table);

  auto same = enc::category_context(t, {1, 1, 1}, table);
  for (long c = 0; c < 3; ++c)
    CHECK(t.value(same).at(0, c) ==
          Catch::Approx(params.category_table.at(1, c)).margin(1e-15));

  // opposite embeddings cancel
  for (long c = 0; c < 3; ++c)
    params.category_table.at(2, c) = -params.category_table.at(0, c);
  Tape<double> t2;
  auto zero = enc::category_context(t2, {0, 2}, t2.param(params.category_table));
  for (long c = 0; c < 3; ++c)
    CHECK(t2.value(zero).at(0, c) == Catch::Approx(0.0).margin(1e-15));

  // mixed session equals a direct mean
  Tape<double> t3;
  auto mixed = enc::category_context(t3, {0, 1, 1, 2},
                                     t3.param(params.category_table));
  for (long c = 0; c < 3; ++c) {
    const double expect =
        (params.category_table.at(0, c) + 2 * params.category_table.at(1, c) +
         params.category_table.at(2, c)) /
        4.0;
    CHECK(t3.value(mixed).at(0, c) == Catch::Approx(expect).margin(1e-15));
  }
}

TEST_CASE("attention pool: zero MLP yields zero, single item yields gamma*z") {
  auto params = make_params(4, 4, 2, 10, 5);
  params.mlp_hidden_w.fill(0);
  params.mlp_hidden_b.fill(0);
  params.mlp_out_w.fill(0);
  params.mlp_out_b.fill(0);
  Rng rng(6);

  Tape<double> t;
  auto fused = t.constant(random_tensor(rng, 3, 4));
  auto virt = t.constant(random_tensor(rng, 1, 4));
  auto ctx = t.constant(random_tensor(rng, 1, 4));
  auto pooled = enc::attention_pool(t, fused, virt, ctx, params, 0.2);
  for (long c = 0; c < 4; ++c) CHECK(t.value(pooled).at(0, c) == 0.0);

  params.init(7);
  Tape<double> t1;
  Tensor<double> z = random_tensor(rng, 1, 4);
  auto single = enc::attention_pool(t1, t1.constant(z),
                                    t1.constant(random_tensor(rng, 1, 4)),
                                    t1.constant(random_tensor(rng, 1, 4)),
                                    params, 0.2);
  // gamma is a scalar; output must be proportional to z
  const double ratio = t1.value(single).at(0, 0) / z.at(0, 0);
  for (long c = 1; c < 4; ++c)
    CHECK(t1.value(single).at(0, c) ==
          Catch::Approx(ratio * z.at(0, c)).margin(1e-12));
}

TEST_CASE("attention pool matches direct recomputation") {
  auto params = make_params(3, 4, 2, 10, 8);
  Rng rng(9);
  Tensor<double> fused = random_tensor(rng, 4, 3);
  Tensor<double> virt = random_tensor(rng, 1, 3);
  Tensor<double> ctx = random_tensor(rng, 1, 3);

  Tape<double> t;
  auto pooled = enc::attention_pool(t, t.constant(fused), t.constant(virt),
                                    t.constant(ctx), params, 0.2);

  std::vector<double> expect(3, 0.0);
  for (long i = 0; i < 4; ++i) {
    std::vector<double> feat;
    for (long c = 0; c < 3; ++c) feat.push_back(fused.at(i, c));
    for (long c = 0; c < 3; ++c) feat.push_back(fused.at(3, c));
    for (long c = 0; c < 3; ++c) feat.push_back(virt.at(0, c));
    for (long c = 0; c < 3; ++c) feat.push_back(ctx.at(0, c));
    auto hidden =
        test_support::matvec_left(feat, test_support::to_mat(params.mlp_hidden_w));
    for (size_t j = 0; j < hidden.size(); ++j)
      hidden[j] =
          test_support::leaky(hidden[j] + params.mlp_hidden_b.at(0, static_cast<long>(j)), 0.2);
    double gamma = params.mlp_out_b.at(0, 0);
    for (size_t j = 0; j < hidden.size(); ++j)
      gamma += hidden[j] * params.mlp_out_w.at(static_cast<long>(j), 0);
    for (long c = 0; c < 3; ++c)
      expect[static_cast<size_t>(c)] += gamma * fused.at(i, c);
  }
  for (long c = 0; c < 3; ++c)
    CHECK(t.value(pooled).at(0, c) ==
          Catch::Approx(expect[static_cast<size_t>(c)]).margin(1e-12));
}

TEST_CASE("combine projects through block forms") {
  const int d = 3;
  auto params = make_params(d, 4, 2, 10, 11);
  Rng rng(12);
  Tensor<double> pooled = random_tensor(rng, 1, d);
  Tensor<double> last = random_tensor(rng, 1, d);

  // [I | 0]^T layout: rows 0..d-1 identity -> z_s = pooled
  params.combine_weight.fill(0);
  for (int i = 0; i < d; ++i) params.combine_weight.at(i, i) = 1.0;
  Tape<double> t;
  auto z1 = enc::combine(t, t.constant(pooled), t.constant(last),
                         t.param(params.combine_weight));
  for (long c = 0; c < d; ++c)
    CHECK(t.value(z1).at(0, c) == Catch::Approx(pooled.at(0, c)).margin(1e-15));

  // [0 | I]: rows d..2d-1 identity -> z_s = last
  params.combine_weight.fill(0);
  for (int i = 0; i < d; ++i) params.combine_weight.at(d + i, i) = 1.0;
  Tape<double> t2;
  auto z2 = enc::combine(t2, t2.constant(pooled), t2.constant(last),
                         t2.param(params.combine_weight));
  for (long c = 0; c < d; ++c)
    CHECK(t2.value(z2).at(0, c) == Catch::Approx(last.at(0, c)).margin(1e-15));

  // random W: matrix product oracle
  params.init(13);
  Tape<double> t3;
  auto z3 = enc::combine(t3, t3.constant(pooled), t3.constant(last),
                         t3.param(params.combine_weight));
  for (long c = 0; c < d; ++c) {
    double expect = 0;
    for (int i = 0; i < d; ++i) {
      expect += pooled.at(0, i) * params.combine_weight.at(i, c);
      expect += last.at(0, i) * params.combine_weight.at(d + i, c);
    }
    CHECK(t3.value(z3).at(0, c) == Catch::Approx(expect).margin(1e-13));
  }
}

TEST_CASE("encode_session doubles the path when both paths coincide") {
  // personalized items equal to the raw look-up rows and virtual node equal
  // to their mean make both paths identical, so h_s = 2 * z_s
  auto params = make_params(4, 6, 2, 10, 17);
  SessionBatch::Entry session;
  session.items = {1, 3, 4};
  session.cats = {0, 1, 0};
  session.target = 2;

  Tape<double> t;
  auto raw = t.gather_rows(t.param(params.item_table), session.items);
  auto virt = t.mean_rows(raw);
  auto hs = encode_session(t, params, session, raw, virt);

  Tape<double> t2;
  auto raw2 = t2.gather_rows(t2.param(params.item_table), session.items);
  auto one_path = enc::session_vector_path(t2, raw2, t2.mean_rows(raw2),
                                           session.cats, params, 0.2);
  for (long c = 0; c < 4; ++c)
    CHECK(t.value(hs).at(0, c) ==
          Catch::Approx(2.0 * t2.value(one_path).at(0, c)).margin(1e-12));
}

TEST_CASE("encode_session equals composing the stage functions twice") {
  auto params = make_params(5, 8, 3, 12, 19);
  Rng rng(20);
  SessionBatch::Entry session;
  session.items = {2, 5, 5, 7};
  session.cats = {1, 0, 0, 2};
  session.target = 1;
  Tensor<double> personalized = random_tensor(rng, 4, 5);
  Tensor<double> virt = random_tensor(rng, 1, 5);

  Tape<double> t;
  auto hs = encode_session(t, params, session, t.constant(personalized),
                           t.constant(virt));

  Tape<double> t2;
  auto main_path = enc::session_vector_path(
      t2, t2.constant(personalized), t2.constant(virt), session.cats, params,
      0.2);
  auto raw = t2.gather_rows(t2.param(params.item_table), session.items);
  auto skip_path = enc::session_vector_path(t2, raw, t2.mean_rows(raw),
                                            session.cats, params, 0.2);
  for (long c = 0; c < 5; ++c)
    CHECK(t.value(hs).at(0, c) ==
          Catch::Approx(t2.value(main_path).at(0, c) +
                        t2.value(skip_path).at(0, c)).margin(1e-12));
}

TEST_CASE("position sensitivity: swapping two items changes the vector") {
  Rng rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    auto params = make_params(4, 9, 2, 10, 100 + trial);
    SessionBatch::Entry session;
    session.items = {1, 2, 3};
    session.cats = {0, 0, 1};
    session.target = 4;
    Tensor<double> pers = random_tensor(rng, 3, 4);
    Tensor<double> virt = random_tensor(rng, 1, 4);

    Tape<double> t;
    auto hs = encode_session(t, params, session, t.constant(pers),
                             t.constant(virt));

    SessionBatch::Entry swapped = session;
    std::swap(swapped.items[0], swapped.items[2]);
    std::swap(swapped.cats[0], swapped.cats[2]);
    Tensor<double> pers_swapped = pers;
    for (long c = 0; c < 4; ++c)
      std::swap(pers_swapped.at(0, c), pers_swapped.at(2, c));
    Tape<double> t2;
    auto hs2 = encode_session(t2, params, swapped, t2.constant(pers_swapped),
                              t2.constant(virt));
    double diff = 0;
    for (long c = 0; c < 4; ++c)
      diff += std::abs(t.value(hs).at(0, c) - t2.value(hs2).at(0, c));
    CHECK(diff > 0.0);
  }
}

TEST_CASE("length sensitivity through the length table") {
  auto params = make_params(4, 9, 2, 10, 29);
  Rng rng(30);
  // same trailing items, different session lengths
  SessionBatch::Entry s2;
  s2.items = {4, 5};
  s2.cats = {0, 0};
  SessionBatch::Entry s3;
  s3.items = {1, 4, 5};
  s3.cats = {0, 0, 0};

  Tensor<double> pers2 = random_tensor(rng, 2, 4);
  Tensor<double> pers3(3, 4);
  for (long c = 0; c < 4; ++c) {
    pers3.at(1, c) = pers2.at(0, c);
    pers3.at(2, c) = pers2.at(1, c);
  }
  Tensor<double> virt = random_tensor(rng, 1, 4);

  Tape<double> ta;
  auto f2 = enc::positional_fuse(ta, ta.constant(pers2),
                                 ta.param(params.pos_table),
                                 ta.param(params.len_table));
  Tape<double> tb;
  auto f3 = enc::positional_fuse(tb, tb.constant(pers3),
                                 tb.param(params.pos_table),
                                 tb.param(params.len_table));
  // the shared last item reads the same position row but different length
  // rows, so its fused vector differs by len_table[1] - len_table[2]
  for (long c = 0; c < 4; ++c) {
    const double expect = params.len_table.at(1, c) - params.len_table.at(2, c);
    CHECK(ta.value(f2).at(1, c) - tb.value(f3).at(2, c) ==
          Catch::Approx(expect).margin(1e-13));
  }
}

TEST_CASE("shape contract across all session lengths") {
  const int t_max = 8;
  auto params = make_params(5, 30, 3, t_max, 31);
  Rng rng(32);
  for (int len = 1; len <= t_max; ++len) {
    SessionBatch::Entry session;
    for (int i = 0; i < len; ++i) {
      session.items.push_back(static_cast<int>(rng.next_below(30)));
      session.cats.push_back(static_cast<int>(rng.next_below(3)));
    }
    Tape<double> t;
    auto hs = encode_session(t, params, session,
                             t.constant(random_tensor(rng, len, 5)),
                             t.constant(random_tensor(rng, 1, 5)));
    CHECK(t.value(hs).rows == 1);
    CHECK(t.value(hs).cols == 5);
  }
}
