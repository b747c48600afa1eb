#include <gtest/gtest.h>

#include "dorasim/cluster.hpp"
#include "dorasim/errors.hpp"

using namespace dorasim;

namespace {
ModelProfile linear_profile() {
  ModelProfile p;
  p.prefill_a0 = 0;
  p.prefill_a1 = 1e-4;
  p.prefill_a2 = 0;
  p.prefill_inflation = 1;
  p.tpot = 0.05;
  return p;
}
}  // namespace

TEST(PrefillTime, LinearFormula) { EXPECT_NEAR(prefill_time(1000, linear_profile()), 0.1, 1e-12); }

TEST(PrefillTime, ZeroTokensRejected) { EXPECT_THROW(prefill_time(0, linear_profile()), PreconditionError); }

TEST(PrefillTime, QuadraticAndInflation) {
  ModelProfile p = linear_profile();
  p.prefill_a0 = 0.02;
  p.prefill_a2 = 1e-9;
  p.prefill_inflation = 1.5;
  const double t = 4000;
  EXPECT_NEAR(prefill_time(4000, p), 1.5 * (0.02 + 1e-4 * t + 1e-9 * t * t), 1e-12);
}

TEST(PrefillTime, StrictlyIncreasing) {
  for (double a1 : {0.0, 1e-5, 1e-3}) {
    for (double a2 : {0.0, 1e-10, 1e-7}) {
      if (a1 + a2 == 0) continue;
      ModelProfile p = linear_profile();
      p.prefill_a1 = a1;
      p.prefill_a2 = a2;
      for (Tokens t = 1; t < 100000; t = t * 3 + 1) EXPECT_GT(prefill_time(2 * t, p), prefill_time(t, p));
    }
  }
}

TEST(DecodeTime, TpotTimesTokens) {
  EXPECT_NEAR(decode_time(2000, linear_profile()), 100.0, 1e-12);
  EXPECT_EQ(decode_time(0, linear_profile()), 0.0);
}

TEST(KvBytes, Formula) {
  ModelProfile p;
  p.layers = 32;
  p.kv_heads = 8;
  p.head_dim = 128;
  p.dtype_bytes = 2;
  EXPECT_EQ(kv_bytes(1000, p), 131'072'000.0);
  EXPECT_EQ(kv_bytes(0, p), 0.0);
  for (Tokens a : {1, 17, 999}) {
    for (Tokens b : {0, 5, 12345}) EXPECT_EQ(kv_bytes(a + b, p), kv_bytes(a, p) + kv_bytes(b, p));
  }
}

TEST(TransferTime, LatencyPlusBandwidth) {
  EXPECT_NEAR(transfer_time(1e9, 50e9, 1e-3), 0.021, 1e-15);
  EXPECT_NEAR(transfer_time(0, 50e9, 1e-3), 0.001, 1e-15);
  ModelProfile p;
  EXPECT_LT(transfer_time(1024, 50e9, 1e-3) * 10, transfer_time(kv_bytes(10000, p), 50e9, 1e-3));
}

TEST(TrainTimeModel, FixedPlusPerToken) {
  TrainTimeModel m{10.0, 600.0};
  EXPECT_NEAR(m.step_time(2'000'000, 4), 10.0 + 600.0 * 2.0 / 4, 1e-9);
}

TEST(ModelProfile, Validation) {
  ModelProfile p = linear_profile();
  p.tpot = 0;
  EXPECT_THROW(p.validate(), ConfigError);
  p = linear_profile();
  p.prefill_inflation = 0.5;
  EXPECT_THROW(p.validate(), ConfigError);
  p = linear_profile();
  p.prefill_a1 = -1;
  EXPECT_THROW(p.validate(), ConfigError);
}

TEST(Topology, GroupsAreConsecutive) {
  auto gs = make_groups(8, 4);
  ASSERT_EQ(gs.size(), 2u);
  EXPECT_EQ(gs[1].device_ids, (std::vector<DeviceId>{4, 5, 6, 7}));
  ClusterTopology t;
  t.n_devices = 6;
  t.devices_per_group = 4;
  EXPECT_THROW(t.validate(), ConfigError);
}
