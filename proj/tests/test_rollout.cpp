#include <cmath>
#include <set>

#include "test_util.hpp"

namespace marl {
namespace {

using marl::testing::TempDir;

class RolloutTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    model_ = new MarModel(ModelConfig{}, 3);
    data_ = new SyntheticData(SyntheticData::generate(DataConfig{}));
    reward_ = new RewardModel(RewardModel::from_data(*data_, RewardKind::pattern));
    GenerateOptions go;
    go.trajectories = 3;
    recs_ = new std::vector<RolloutRecord>(rollout_group(*model_, 5, 4, go, CounterRng(17), 0xAB, *data_, *reward_));
  }
  static void TearDownTestSuite() {
    delete recs_;
    delete reward_;
    delete data_;
    delete model_;
  }
  static MarModel* model_;
  static SyntheticData* data_;
  static RewardModel* reward_;
  static std::vector<RolloutRecord>* recs_;
};

MarModel* RolloutTest::model_ = nullptr;
SyntheticData* RolloutTest::data_ = nullptr;
RewardModel* RolloutTest::reward_ = nullptr;
std::vector<RolloutRecord>* RolloutTest::recs_ = nullptr;

TEST_F(RolloutTest, RecordsRetainEveryState) {
  const std::size_t K = 8, T = 10, S = 3, n = 64, D = 8;
  ASSERT_EQ(recs_->size(), 4u);
  for (const auto& r : *recs_) {
    EXPECT_EQ(r.class_id, 5u);
    EXPECT_EQ(r.num_trajectories(), S);
    ASSERT_EQ(r.gen.steps.size(), K);
    EXPECT_NO_THROW(r.gen.schedule.validate(n));
    EXPECT_EQ(r.gen.grid.shape(), (Shape{n, D}));
    EXPECT_EQ(r.gen.final_decode.shape(), (Shape{n, D}));
    for (std::size_t k = 0; k < K; ++k) {
      const auto& st = r.gen.steps[k];
      const std::size_t m = st.positions.size();
      EXPECT_EQ(st.positions, r.gen.schedule.steps[k]);
      EXPECT_EQ(st.z.shape(), (Shape{m, model_->config().cond_dim}));
      EXPECT_EQ(st.preview.defined(), k > 0);
      ASSERT_EQ(st.trajectories.size(), S);
      for (const auto& tr : st.trajectories) {
        ASSERT_EQ(tr.states.size(), T + 1);
        for (const auto& x : tr.states) EXPECT_EQ(x.shape(), (Shape{m, D}));
        EXPECT_FALSE(tr.logp[0].defined());
        EXPECT_FALSE(tr.logp[1].defined());
        for (std::size_t t = 2; t <= T; ++t) EXPECT_EQ(tr.logp[t].numel(), m);
      }
      // The canonical x_0 is what the grid holds.
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t c = 0; c < D; ++c)
          EXPECT_EQ(r.gen.grid.at(st.positions[i], c), st.trajectories[0].x0().at(i, c));
    }
  }
}

TEST_F(RolloutTest, StoredLogProbsMatchRecomputation) {
  const auto& sched = model_->schedule();
  for (const auto& r : *recs_)
    for (std::size_t k : {0u, 4u, 7u}) {
      const auto& st = r.gen.steps[k];
      const Tensor z = recompute_conditioning(*model_, r, k + 1);
      for (std::size_t i = 0; i < z.numel(); ++i) EXPECT_NEAR(z[i], st.z[i], 1e-12);
      for (std::size_t t : {2u, 6u, 10u}) {
        const auto& tr = st.trajectories[1];
        const std::vector<std::size_t> ts(st.positions.size(), t);
        const Tensor eps = model_->head().forward(tr.states[t], ts, st.z);
        const Tensor mu = posterior_mean(sched, tr.states[t], eps, ts, 4.0);
        const std::size_t D = 8;
        for (std::size_t i = 0; i < st.positions.size(); ++i) {
          StepPosterior post{std::vector<double>(mu.vec().begin() + i * D, mu.vec().begin() + (i + 1) * D),
                             sched.posterior_variance[t], t};
          EXPECT_NEAR(tr.logp[t][i], step_logprob(std::span(tr.states[t - 1].vec()).subspan(i * D, D), post), 1e-10);
        }
      }
    }
}

TEST_F(RolloutTest, TrajectoriesDifferButShareConditioning) {
  const auto& st = (*recs_)[0].gen.steps[3];
  EXPECT_NE(st.trajectories[0].x0().vec(), st.trajectories[1].x0().vec());
  EXPECT_NE(st.trajectories[1].states[10].vec(), st.trajectories[2].states[10].vec());
}

TEST_F(RolloutTest, AdvantagesAreGroupNormalized) {
  std::vector<double> rewards;
  for (const auto& r : *recs_) {
    EXPECT_NEAR(r.reward, compute_reward(r.gen.grid, 5, *reward_, *data_), 0.0);
    rewards.push_back(r.reward);
  }
  const auto adv = group_advantages(rewards);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ((*recs_)[i].advantage, adv[i]);
  std::set<std::uint64_t> masks;
  for (const auto& r : *recs_) masks.insert(r.gen.schedule.steps[0].front() * 1000 + r.gen.schedule.steps[0].size());
  EXPECT_GT(masks.size(), 1u);
}

TEST_F(RolloutTest, PostHocResamplingIsEquivalent) {
  GenerateOptions a, b;
  a.trajectories = b.trajectories = 3;
  b.resample_post_hoc = false;
  const auto ms = member_mask_schedule(model_->config(), CounterRng(17), 0x99);
  NoGradScope ng;
  const auto ga = generate(*model_, 2, ms, CounterRng(17), 0x99, a);
  const auto gb = generate(*model_, 2, ms, CounterRng(17), 0x99, b);
  EXPECT_EQ(ga.grid.vec(), gb.grid.vec());
  for (std::size_t k = 0; k < ga.steps.size(); ++k)
    for (std::size_t s = 0; s < 3; ++s)
      for (std::size_t t = 0; t <= 10; ++t)
        EXPECT_EQ(ga.steps[k].trajectories[s].states[t].vec(), gb.steps[k].trajectories[s].states[t].vec());
}

TEST_F(RolloutTest, RepeatedRolloutIsBitIdentical) {
  GenerateOptions go;
  go.trajectories = 3;
  const auto again = rollout_group(*model_, 5, 4, go, CounterRng(17), 0xAB, *data_, *reward_, 2);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(again[i].gen.grid.vec(), (*recs_)[i].gen.grid.vec());
    EXPECT_EQ(again[i].reward, (*recs_)[i].reward);
  }
}

TEST_F(RolloutTest, DumpRoundTrip) {
  TempDir tmp;
  save_rollout_dump(tmp / "g.bin", *recs_, 10);
  const auto back = load_rollout_dump(tmp / "g.bin");
  ASSERT_EQ(back.size(), recs_->size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    const auto &a = back[i], &b = (*recs_)[i];
    EXPECT_EQ(a.reward, b.reward);
    EXPECT_EQ(a.advantage, b.advantage);
    EXPECT_EQ(a.gen.grid.vec(), b.gen.grid.vec());
    EXPECT_EQ(a.gen.final_decode.vec(), b.gen.final_decode.vec());
    ASSERT_EQ(a.gen.steps.size(), b.gen.steps.size());
    for (std::size_t k = 0; k < a.gen.steps.size(); ++k) {
      EXPECT_EQ(a.gen.steps[k].positions, b.gen.steps[k].positions);
      EXPECT_EQ(a.gen.steps[k].trajectories[2].states[5].vec(), b.gen.steps[k].trajectories[2].states[5].vec());
      EXPECT_EQ(a.gen.steps[k].trajectories[1].logp[7].vec(), b.gen.steps[k].trajectories[1].logp[7].vec());
    }
  }
  // A reloaded record supports term construction.
  TermOptions to;
  const auto cm = generation_consistency(back[0].gen, 8, 0.0);
  EXPECT_NO_THROW(build_step_terms(*model_, nullptr, back[0], 3, {2, 5}, to, &cm));
}

TEST_F(RolloutTest, GroupOfOneIsRejected) {
  EXPECT_THROW(rollout_group(*model_, 0, 1, GenerateOptions{}, CounterRng(1), 1, *data_, *reward_), ConfigError);
  EXPECT_THROW(rollout_group(*model_, 99, 2, GenerateOptions{}, CounterRng(1), 1, *data_, *reward_), ConfigError);
}

TEST_F(RolloutTest, MissingStatesAreSequencingErrors) {
  RolloutRecord empty;
  EXPECT_THROW(recompute_conditioning(*model_, empty, 1), SequencingError);
  TermOptions to;
  to.trajectories = 1;
  to.consistency = false;
  EXPECT_THROW(build_step_terms(*model_, nullptr, (*recs_)[0], 1, {1}, to), SequencingError);
  EXPECT_THROW(build_step_terms(*model_, nullptr, (*recs_)[0], 9, {2}, to), SequencingError);
  to.trajectories = 4;
  EXPECT_THROW(build_step_terms(*model_, nullptr, (*recs_)[0], 1, {2}, to), ConfigError);
}

}  // namespace
}  // namespace marl
