#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ceusnav/error.hpp"
#include "ceusnav/motionsim.hpp"

using namespace ceusnav;

namespace {

// Mean translation magnitude of a path over [t0, t1) sampled at 10 Hz.
double mean_displacement(MotionPath& path, double t0, double t1) {
  double sum = 0.0;
  int n = 0;
  for (double t = t0; t < t1; t += 0.1, ++n) sum += path.at(t).translation.norm();
  return sum / n;
}

double batch_mean(MotionKind kind, double t0, double t1, int runs = 20) {
  double sum = 0.0;
  for (int r = 0; r < runs; ++r) {
    MotionPath path(MotionModel::defaults(kind, mix_seed(99, r)));
    sum += mean_displacement(path, t0, t1);
  }
  return sum / runs;
}

}  // namespace

TEST(Motion, ZeroMagnitudesGiveIdentity) {
  MotionModel m;
  for (double t : {0.0, 1.3, 100.0}) {
    const auto p = sample_motion(m, t);
    EXPECT_EQ(p.translation, Vec3::Zero());
    EXPECT_DOUBLE_EQ(p.rotation.w(), 1.0);
  }
}

TEST(Motion, BreathingPeakAtQuarterPeriod) {
  MotionModel m;
  m.kind = MotionKind::breathing;
  m.breathing_amplitude_mm = 2.0;
  m.breathing_period_s = 4.0;
  m.breathing_axis = Vec3(0, 0, 5);
  const auto p = sample_motion(m, 1.0);
  EXPECT_NEAR((p.translation - Vec3(0, 0, 2)).norm(), 0.0, 1e-12);
}

TEST(Motion, BreathingGainSuppresses) {
  MotionPath path(MotionModel::defaults(MotionKind::breathing));
  EXPECT_EQ(path.at(1.0, 0.0).translation, Vec3::Zero());
}

TEST(Motion, DeterministicPerSeed) {
  const auto m = MotionModel::defaults(MotionKind::hold_bmode, 4);
  MotionPath a(m), b(m);
  for (double t = 0.0; t < 30.0; t += 0.37) EXPECT_EQ(a.at(t), b.at(t));
  // Lazily extended paths do not depend on query order.
  MotionPath c(m);
  EXPECT_EQ(c.at(25.0), MotionPath(m).at(25.0));
}

TEST(Motion, NegativeTimeRejected) {
  MotionPath path(MotionModel::defaults(MotionKind::hold_tracked));
  EXPECT_THROW(path.at(-1.0), Error);
}

TEST(Motion, NegativeMagnitudeIsConfigError) {
  MotionModel m;
  m.jitter_sd_mm = -1.0;
  try {
    m.validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::config);
  }
}

TEST(Motion, RepositionOffsetDecays) {
  auto m = MotionModel::defaults(MotionKind::reposition, 8);
  m.jitter_sd_mm = 0.0;
  m.rot_jitter_sd_deg = 0.0;
  MotionPath path(m);
  EXPECT_NEAR(path.at(0.0).translation.norm(), 25.0, 1e-9);
  EXPECT_NEAR(path.at(6.0).translation.norm(), 25.0 * std::exp(-1.0), 1e-9);
}

TEST(Motion, BlindDriftsFurtherThanTracked) {
  const double blind = batch_mean(MotionKind::hold_blind, 0.0, 240.0);
  const double tracked = batch_mean(MotionKind::hold_tracked, 0.0, 240.0);
  EXPECT_GT(blind, tracked);
}

TEST(Motion, MeanRevertingModelsAreStationary) {
  for (auto kind : {MotionKind::hold_bmode, MotionKind::hold_tracked}) {
    const double first = batch_mean(kind, 0.0, 120.0);
    const double second = batch_mean(kind, 120.0, 240.0);
    EXPECT_LT(std::abs(second - first) / first, 0.5) << to_string(kind);
  }
}

TEST(Motion, BlindDisplacementGrowsWithDuration) {
  EXPECT_GT(batch_mean(MotionKind::hold_blind, 0.0, 240.0), batch_mean(MotionKind::hold_blind, 0.0, 60.0));
}

TEST(Motion, JsonOverridesDefaults) {
  const auto m = motion_model_from_json({{"kind", "hold_blind"}, {"jitter_sd_mm", 0.25}, {"seed", 5}});
  EXPECT_EQ(m.kind, MotionKind::hold_blind);
  EXPECT_DOUBLE_EQ(m.jitter_sd_mm, 0.25);
  EXPECT_EQ(m.drift_rate_mm_per_min, MotionModel::defaults(MotionKind::hold_blind).drift_rate_mm_per_min);
  const auto back = motion_model_from_json(to_json(m));
  EXPECT_EQ(to_json(back), to_json(m));
  EXPECT_THROW(motion_model_from_json({{"kind", "wobble"}}), Error);
}

TEST(Tracker, ZeroNoiseIsExact) {
  std::mt19937_64 rng(1);
  TrackerNoise noise{0.0, 0.0, 0.0, 60.0};
  const auto pose = RigidTransform::from_axis_angle(Vec3(1, 2, 3), 0.4, Vec3(5, 6, 7));
  const auto s = measure_tracker(pose, noise, 2.5, rng);
  ASSERT_TRUE(s);
  EXPECT_EQ(s->marker_pose.translation, pose.translation);
  EXPECT_NEAR(rotation_angle_between(s->marker_pose, pose), 0.0, 1e-12);
  EXPECT_DOUBLE_EQ(s->timestamp, 2.5);
}

TEST(Tracker, CertainDropout) {
  std::mt19937_64 rng(2);
  TrackerNoise noise{0.1, 0.05, 1.0, 60.0};
  for (int i = 0; i < 100; ++i) EXPECT_FALSE(measure_tracker(RigidTransform{}, noise, i, rng));
}

TEST(Tracker, TranslationNoiseSd) {
  std::mt19937_64 rng(3);
  TrackerNoise noise{0.2, 0.0, 0.0, 60.0};
  double sum = 0.0, sum_sq = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const double x = measure_tracker(RigidTransform{}, noise, i, rng)->marker_pose.translation.x();
    sum += x;
    sum_sq += x * x;
  }
  const double sd = std::sqrt((sum_sq - sum * sum / n) / (n - 1));
  EXPECT_NEAR(sd, 0.2, 0.02);
}

TEST(Session, SampleCountAndTimestamps) {
  SessionOptions opt;
  opt.duration_s = 10.0;
  const auto s = generate_session(MotionModel::defaults(MotionKind::hold_bmode, 1), TrackerNoise{}, opt);
  ASSERT_EQ(s.samples.size(), 600u);
  for (std::size_t i = 1; i < s.samples.size(); ++i) EXPECT_GT(s.samples[i].t, s.samples[i - 1].t);
}

TEST(Session, SameSeedSameStream) {
  SessionOptions opt;
  opt.duration_s = 5.0;
  TrackerNoise noise;
  noise.dropout_prob = 0.1;
  const auto m = MotionModel::defaults(MotionKind::hold_blind, 77);
  const auto a = generate_session(m, noise, opt);
  const auto b = generate_session(m, noise, opt);
  ASSERT_EQ(a.samples.size(), b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    EXPECT_EQ(a.samples[i].truth, b.samples[i].truth);
    ASSERT_EQ(a.samples[i].measured.has_value(), b.samples[i].measured.has_value());
    if (a.samples[i].measured) {
      EXPECT_EQ(a.samples[i].measured->marker_pose, b.samples[i].measured->marker_pose);
    }
  }
}

TEST(Session, FlashScheduleTwoAndAHalfMinutesApart) {
  SessionOptions opt;
  opt.duration_s = 480.0;
  opt.flash_times = disruption_schedule(95.0);
  SessionGenerator gen(MotionModel::defaults(MotionKind::breathing, 3), TrackerNoise{}, opt);
  ASSERT_EQ(gen.flash_times().size(), 2u);
  EXPECT_DOUBLE_EQ(gen.flash_times()[0], 95.0);
  EXPECT_DOUBLE_EQ(gen.flash_times()[1], 245.0);
}

TEST(Session, FlashOutsideDurationRejected) {
  SessionOptions opt;
  opt.duration_s = 10.0;
  opt.flash_times = {20.0};
  EXPECT_THROW(SessionGenerator(MotionModel{}, TrackerNoise{}, opt), Error);
}

TEST(Session, BreathHoldAfterFlash) {
  SessionOptions opt;
  opt.duration_s = 60.0;
  opt.flash_times = {10.0};
  opt.breath_hold_after_flash_s = 20.0;
  auto m = MotionModel::defaults(MotionKind::breathing, 3);
  SessionGenerator gen(m, TrackerNoise{}, opt);
  EXPECT_EQ(gen.truth_at(21.0).translation, Vec3::Zero());  // sin peak suppressed during the hold
  EXPECT_NEAR(gen.truth_at(33.0).translation.norm(), m.breathing_amplitude_mm, 1e-9);
}

TEST(Session, PerturbationAboutProbeOrigin) {
  const auto ref = RigidTransform::from_translation(Vec3(10, 0, 0));
  const auto pert = RigidTransform::from_axis_angle(Vec3::UnitZ(), 0.5, Vec3(1, 2, 3));
  const auto out = apply_perturbation(ref, pert);
  EXPECT_EQ(out.translation, Vec3(11, 2, 3));
  EXPECT_NEAR(rotation_angle(out), 0.5, 1e-12);
}

TEST(Seeds, MixIsStableAndSpreads) {
  EXPECT_EQ(mix_seed(1, 2), mix_seed(1, 2));
  EXPECT_NE(mix_seed(1, 2), mix_seed(2, 1));
  EXPECT_NE(mix_seed(0, 0), mix_seed(0, 1));
}
