// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ceusnav/error.hpp"
#include "ceusnav/geometry.hpp"
#include "ceusnav/harness.hpp"
#include "ceusnav/metrics.hpp"
#include "ceusnav/phantom.hpp"
#include "ceusnav/quant.hpp"
#include "ceusnav/realign.hpp"
#include "ceusnav/stream.hpp"
#include "oracles.hpp"

using namespace ceusnav;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Collects sub-checks of one criterion; the criterion passes if all do.
class Criterion {
 public:
  void check(bool ok, const std::string& what) {
    if (!ok) failed_.push_back(what);
    notes_.push_back(what);
  }
  bool ok() const { return failed_.empty(); }
  std::string detail() const {
    const auto& list = ok() ? notes_ : failed_;
    std::string out;
    for (const auto& s : list) out += (out.empty() ? "" : "; ") + s;
    return out;
  }

 private:
  std::vector<std::string> notes_, failed_;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
}

TimeIntensityCurve model_tic(double a, double beta, double t_end) {
  TimeIntensityCurve tic;
  for (int t = 0; t <= static_cast<int>(t_end); ++t) tic.push_back(t, a * (1 - std::exp(-beta * t)), 1);
  return tic;
}

RepeatabilityConfig motionless(RepeatabilityConfig c) {
  c.base.motion.breathing_amplitude_mm = 0.0;
  c.base.motion.drift_rate_mm_per_min = 0.0;
  c.base.motion.jitter_sd_mm = 0.0;
  c.base.motion.rot_jitter_sd_deg = 0.0;
  c.base.tracker.trans_sd_mm = 0.0;
  c.base.tracker.rot_sd_deg = 0.0;
  c.base.tracker.dropout_prob = 0.0;
  return c;
}

// ---------------------------------------------------------------------------

Criterion hand_eye() {
  Criterion c;
  std::mt19937_64 rng(101);
  double worst_rot = 0.0, worst_trans = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = oracle::random_pose(rng);
    const auto pairs = oracle::synth_pairs(x, 10, rng);
    const auto cal = hand_eye_calibrate(pairs);
    worst_rot = std::max(worst_rot, oracle::rotation_error(cal.x, x));
    worst_trans = std::max(worst_trans, oracle::translation_error(cal.x, x));
  }
  c.check(worst_rot < 1e-6 && worst_trans < 1e-6,
          "noise-free worst error " + fmt("%.2e rad", worst_rot) + ", " + fmt("%.2e mm", worst_trans));

  double worst_noisy = 0.0, worst_time = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = oracle::random_pose(rng);
    const auto pairs = oracle::synth_pairs(x, 50, rng, 0.1, 0.05);
    const auto t0 = Clock::now();
    const auto cal = hand_eye_calibrate(pairs);
    worst_time = std::max(worst_time, seconds_since(t0));
    worst_noisy = std::max(worst_noisy, oracle::translation_error(cal.x, x));
  }
  c.check(worst_noisy < 1.5, "50 pairs at 0.1 mm/0.05 deg: worst translation error " + fmt("%.3f mm", worst_noisy));
  c.check(worst_time < 1.0, "runtime " + fmt("%.4f s", worst_time));
  return c;
}

Criterion codec() {
  Criterion c;
  std::mt19937_64 rng(202);
  std::size_t mismatches = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto m = oracle::random_message(rng);
    if (decode_message(encode_message(m)) != m) ++mismatches;
  }
  c.check(mismatches == 0, "10^4 round trips, " + std::to_string(mismatches) + " mismatches");

  // Decoder fuzz: random bytes, mutated valid messages, truncations. Any
  // crash aborts the binary; a decoded message must stay within its input.
  std::uniform_int_distribution<int> byte(0, 255), len(0, 128);
  std::size_t overreads = 0, decoded = 0;
  StreamDecoder stream;
  for (int i = 0; i < 1000000; ++i) {
    std::vector<std::uint8_t> bytes;
    if (i % 2 == 0) {
      bytes.resize(static_cast<std::size_t>(len(rng)));
      for (auto& b : bytes) b = static_cast<std::uint8_t>(byte(rng));
      if (i % 8 == 0 && bytes.size() >= 4) std::copy(kMagic.begin(), kMagic.end(), bytes.begin());
    } else {
      bytes = encode_message(oracle::random_message(rng));
      const int flips = byte(rng) % 5;
      for (int f = 0; f < flips; ++f) bytes[rng() % bytes.size()] = static_cast<std::uint8_t>(byte(rng));
      if (byte(rng) < 64) bytes.resize(rng() % (bytes.size() + 1));
    }
    Message m;
    std::size_t consumed = 0;
    if (try_decode(bytes, m, consumed) == DecodeStatus::ok) {
      ++decoded;
      if (consumed > bytes.size()) ++overreads;
    }
    try {
      decode_message(bytes);
    } catch (const Error&) {
    }
    stream.feed(bytes);
    while (stream.next()) {
    }
  }
  c.check(overreads == 0, "10^6 fuzz cases, no crash, " + std::to_string(decoded) + " decoded, " +
                              std::to_string(overreads) + " over-reads");

  oracle::TempDir dir;
  const RepeatabilityConfig cfg;
  const auto log = simulate_patient(cfg, 0);
  record_session(log, dir / "p.snav");
  const auto back = read_session(dir / "p.snav");
  c.check(back.messages == log.messages, "record->replay identity over " + std::to_string(log.messages.size()) +
                                             " messages");
  const double step = std::pow(10.0, cfg.base.render.dynamic_range_db / 255.0 / 20.0) - 1.0;
  double worst = 0.0;
  bool rows_ok = true;
  for (bool realign : {false, true}) {
    QuantifyOptions q;
    q.realign = realign;
    const auto mem = quantify_session(log, q);
    const auto disk = quantify_session(back, q);
    rows_ok = rows_ok && mem.size() == disk.size() && !mem.empty();
    for (std::size_t k = 0; k < std::min(mem.size(), disk.size()); ++k) {
      rows_ok = rows_ok && mem[k].ok && disk[k].ok;
      worst = std::max(worst, std::abs(mem[k].fit.A - disk[k].fit.A) / mem[k].fit.A);
    }
  }
  c.check(rows_ok && worst <= step, "replayed quantification: worst relative A difference " + fmt("%.2e", worst) +
                                        " (one code step " + fmt("%.4f", step) + ")");
  return c;
}

Criterion fit() {
  Criterion c;
  double worst = 0.0;
  for (double a : {0.1, 0.5, 2.0}) {
    for (double beta : {0.05, 0.2, 1.0}) {
      const auto f = fit_replenishment(model_tic(a, beta, 90.0));
      worst = std::max({worst, std::abs(f.A / a - 1.0), std::abs(f.beta / beta - 1.0)});
    }
  }
  c.check(worst < 1e-6, "noise-free worst relative error " + fmt("%.2e", worst));

  std::mt19937_64 rng(303);
  std::normal_distribution<double> g;
  std::vector<double> ea, eb;
  for (int run = 0; run < 100; ++run) {
    auto tic = model_tic(0.4, 0.15, 120.0);
    for (auto& v : tic.values) v *= 1.0 + 0.05 * g(rng);
    const auto f = fit_replenishment(tic);
    ea.push_back(std::abs(f.A - 0.4) / 0.4);
    eb.push_back(std::abs(f.beta - 0.15) / 0.15);
  }
  c.check(median(ea) < 0.05 && median(eb) < 0.05,
          "5% noise, 100 runs: median errors A " + fmt("%.4f", median(ea)) + ", beta " + fmt("%.4f", median(eb)));

  auto noisy = model_tic(0.3, 0.2, 90.0);
  for (auto& v : noisy.values) v *= 1.0 + 0.03 * g(rng);
  const auto base = fit_replenishment(noisy);
  bool scale_exact = true;
  for (double k : {0.125, 0.5, 4.0, 1024.0}) {
    auto s = noisy;
    for (auto& v : s.values) v *= k;
    const auto f = fit_replenishment(s);
    scale_exact = scale_exact && f.beta == base.beta && f.A == k * base.A;
  }
  // Other factors round y·k itself, so equality holds to the search tolerance.
  const double search_tol = FitOptions{}.relative_tolerance;
  double scale_dev = 0.0;
  for (double k : {3.0, 0.7, 11.0}) {
    auto s = noisy;
    for (auto& v : s.values) v *= k;
    const auto f = fit_replenishment(s);
    scale_dev = std::max({scale_dev, std::abs(f.beta / base.beta - 1.0), std::abs(f.A / (k * base.A) - 1.0)});
  }
  c.check(scale_exact && scale_dev <= search_tol,
          std::string("scale equivariance ") + (scale_exact ? "bit-exact" : "NOT bit-exact") + " for powers of two, " +
              fmt("%.1e", scale_dev) + " otherwise (search tolerance " + fmt("%.0e", search_tol) + ")");
  bool shift_exact = true;
  for (double shift : {17.0, 256.0, 1000.0}) {
    auto s = noisy;
    for (auto& t : s.times) t += shift;
    FitOptions opt;
    opt.t0 = shift;
    const auto f = fit_replenishment(s, opt);
    shift_exact = shift_exact && f.beta == base.beta && f.A == base.A;
  }
  c.check(shift_exact, std::string("time-shift invariance ") + (shift_exact ? "bit-exact" : "NOT bit-exact"));
  return c;
}

Criterion linearization() {
  Criterion c;
  const double d = 60.0;
  const double step = std::pow(10.0, d / 255.0 / 20.0) - 1.0;
  int code_mismatch = 0, outside = 0;
  for (int v = 0; v < 256; ++v) {
    if (log_compress(linearize(v, d), d) != v) ++code_mismatch;
    if (std::abs(linearize(v, d) / oracle::linearize_formula(v, d) - 1.0) > 1e-12) ++outside;
    for (double frac : {-0.45, 0.45}) {
      const double i = linearize(v, d) * std::pow(1.0 + step, frac);
      if (std::abs(linearize(log_compress(i, d), d) / i - 1.0) > step) ++outside;
    }
  }
  c.check(code_mismatch == 0 && outside == 0, "256 codes: " + std::to_string(code_mismatch) + " code mismatches, " +
                                                  std::to_string(outside) + " beyond one step (" + fmt("%.4f", step) +
                                                  ")");
  return c;
}

Criterion steady_state() {
  Criterion c;
  TimeIntensityCurve tic;
  for (int t = 0; t <= 400; ++t) tic.push_back(t, 1 - std::exp(-t / 30.0), 1);
  const SteadyStateOptions opt;
  const auto rep = detect_steady_state(tic, opt);
  const double analytic = oracle::steady_crossing_time(30.0, opt.slope_tolerance);
  c.check(rep.reached && std::abs(rep.time_to_steady - analytic) <= opt.window_s,
          "detected " + fmt("%.1f s", rep.time_to_steady) + " vs analytic " + fmt("%.1f s", analytic) +
              " (window " + fmt("%.0f s", opt.window_s) + ")");
  bool monotone = true;
  double prev = 1e300;
  for (int i = 0; i < 10; ++i) {
    const auto r = detect_steady_state(tic, {opt.window_s, 0.001 * (i + 1)});
    monotone = monotone && r.reached && r.time_to_steady <= prev;
    prev = r.time_to_steady;
  }
  c.check(monotone, "nonincreasing over 10 tolerances 0.001..0.010");
  return c;
}

Criterion realignment() {
  Criterion c;
  std::mt19937_64 rng(404);
  std::uniform_int_distribution<int> byte(0, 255);
  VolumeFrame src;
  src.grid = {{24, 20, 16}, {1, 1, 1}};
  src.voxels.resize(src.grid.voxel_count());
  for (auto& v : src.voxels) v = static_cast<std::uint8_t>(byte(rng));
  const auto ref = RigidTransform::from_axis_angle(Vec3(1, -1, 2), 0.9, Vec3(5, 6, 7));
  src.pose = ref * RigidTransform::from_translation(Vec3(2, 0, 0));
  const auto out = realign_frame(src, ref, src.grid);
  const auto expected = oracle::shift_x(src, -2);
  std::size_t interior = 0, mismatched = 0;
  for (int k = 0; k < src.grid.dims[2]; ++k)
    for (int j = 0; j < src.grid.dims[1]; ++j)
      for (int i = 2; i < src.grid.dims[0]; ++i) {
        const auto idx = src.grid.linear_index(i, j, k);
        ++interior;
        if (!out.mask[idx] || out.frame.voxels[idx] != expected[idx]) ++mismatched;
      }
  c.check(mismatched == 0, "+2 voxel shift: " + std::to_string(mismatched) + " of " + std::to_string(interior) +
                               " interior voxels differ");

  const auto r = oracle::breathing_tics(405);
  c.check(r.rms_aligned < 0.05 && r.rms_unaligned > r.rms_aligned,
          "breathing TIC RMS error aligned " + fmt("%.4f", r.rms_aligned) + ", unaligned " +
              fmt("%.4f", r.rms_unaligned));
  return c;
}

Criterion repeatability() {
  Criterion c;
  const RepeatabilityConfig cfg;
  const auto t0 = Clock::now();
  const auto rep = run_repeatability(cfg);
  const double runtime = seconds_since(t0);
  std::size_t usable = 0;
  for (const auto& p : rep.patients) usable += p.usable;
  const bool have = rep.rbv_aligned && rep.rbv_unaligned && rep.rbf_aligned && rep.rbf_unaligned;
  c.check(have && cfg.patients == 8, std::to_string(cfg.patients) + " patients, " + std::to_string(usable) +
                                         " usable");
  if (have) {
    c.check(rep.rbv_aligned->icc > rep.rbv_unaligned->icc, "rBV ICC aligned " + fmt("%.3f", rep.rbv_aligned->icc) +
                                                                " > unaligned " + fmt("%.3f", rep.rbv_unaligned->icc));
    c.check(rep.rbf_aligned->icc > rep.rbf_unaligned->icc, "rBF ICC aligned " + fmt("%.3f", rep.rbf_aligned->icc) +
                                                                " > unaligned " + fmt("%.3f", rep.rbf_unaligned->icc));
  }
  c.check(runtime < 120.0, "runtime " + fmt("%.1f s", runtime));

  const auto still = run_repeatability(motionless(cfg));
  bool equal = still.rbv_aligned && still.rbv_unaligned;
  double dev = 0.0;
  if (equal) {
    dev = std::max(std::abs(still.rbv_aligned->icc - still.rbv_unaligned->icc),
                   std::abs(still.rbf_aligned->icc - still.rbf_unaligned->icc));
    equal = dev <= 1e-6;
  }
  c.check(equal, "zero motion: |ICC aligned - unaligned| " + fmt("%.1e", dev));

  auto clean_cfg = motionless(cfg);
  clean_cfg.base.render.noise_sd = 0.0;
  const auto clean = run_repeatability(clean_cfg);
  const bool perfect = clean.rbv_aligned && clean.rbf_aligned && clean.rbv_unaligned && clean.rbf_unaligned &&
                       clean.rbv_aligned->icc == 1.0 && clean.rbf_aligned->icc == 1.0 &&
                       clean.rbv_unaligned->icc == 1.0 && clean.rbf_unaligned->icc == 1.0;
  c.check(perfect, std::string("zero noise and motion: ICC ") + (perfect ? "= 1" : "!= 1"));
  return c;
}

Criterion operator_study() {
  Criterion c;
  OperatorStudyConfig cfg;
  cfg.operators = 20;
  const auto res = run_operator_study(cfg);
  const auto& bm = res.summary(MotionKind::hold_bmode);
  const auto& tr = res.summary(MotionKind::hold_tracked);
  const auto& bl = res.summary(MotionKind::hold_blind);
  c.check(bm.runs >= 20 && tr.runs >= 20 && bl.runs >= 20, std::to_string(tr.runs) + " runs per condition, " +
                                                                fmt("%.0f s", cfg.duration_s) + " each");
  c.check(bl.mean > tr.mean, "mean blind " + fmt("%.2f", bl.mean) + " > tracked " + fmt("%.2f mm", tr.mean));
  c.check(tr.sd < bm.sd && bm.sd < bl.sd, "SD tracked " + fmt("%.2f", tr.sd) + " < bmode " + fmt("%.2f", bm.sd) +
                                              " < blind " + fmt("%.2f mm", bl.sd));

  bool formulas = true;
  {
    const std::vector<double> x{0, 0, 0, 10};
    const auto f = histogram_features(x);
    formulas = formulas && f.mean == 2.5 && f.median == 0.0 && std::abs(f.sd - 5.0) < 1e-12 &&
               std::abs(f.skewness - 2.0) < 1e-12;
    const std::vector<double> y{1, 2, 3};
    const auto h = histogram_features(y);
    formulas = formulas && h.mean == 2.0 && h.median == 2.0 && h.sd == 1.0 && std::abs(h.skewness) < 1e-15;
    for (const auto& r : res.runs) {
      formulas = formulas && std::abs(r.features.skewness - oracle::g1_skewness(r.trace.displacement)) <=
                                 1e-9 * std::max(1.0, std::abs(r.features.skewness));
    }
  }
  c.check(formulas, "histogram features match hand-computed and independent skewness oracles");
  return c;
}

Criterion icc() {
  Criterion c;
  double worst = 0.0;
  std::mt19937_64 rng(1);
  for (double rho : {0.3, 0.6, 0.9}) {
    worst = std::max(worst, std::abs(icc_pairs(oracle::random_effects_pairs(rho, 200, rng)).icc - rho));
  }
  c.check(worst < 0.1, "rho in {0.3,0.6,0.9}, 200 subjects: worst |ICC - rho| " + fmt("%.3f", worst));
  double worst_bias = 0.0;
  std::mt19937_64 rep_rng(2);
  for (double rho : {0.2, 0.5, 0.8}) {
    double sum = 0.0;
    for (int rep = 0; rep < 200; ++rep) sum += icc_pairs(oracle::random_effects_pairs(rho, 200, rep_rng)).icc;
    worst_bias = std::max(worst_bias, std::abs(sum / 200 - rho));
  }
  c.check(worst_bias < 0.02, "mean over 200 replicate studies within " + fmt("%.4f", worst_bias) + " of rho");
  std::vector<MeasurementPair> same{{"a", 1.0, 1.0}, {"b", 2.5, 2.5}, {"c", 0.3, 0.3}, {"d", 4.0, 4.0}};
  const double one = icc_pairs(same).icc;
  c.check(one == 1.0, "identical pairs ICC " + fmt("%.17g", one));
  const bool bands = classify_agreement(0.20) == AgreementBand::none &&
                     classify_agreement(std::nextafter(0.20, 1.0)) == AgreementBand::poor &&
                     classify_agreement(0.40) == AgreementBand::poor &&
                     classify_agreement(std::nextafter(0.40, 1.0)) == AgreementBand::moderate &&
                     classify_agreement(0.60) == AgreementBand::moderate &&
                     classify_agreement(std::nextafter(0.60, 1.0)) == AgreementBand::good &&
                     classify_agreement(0.80) == AgreementBand::good &&
                     classify_agreement(std::nextafter(0.80, 1.0)) == AgreementBand::excellent;
  c.check(bands, "bands switch exactly above 0.20/0.40/0.60/0.80");
  return c;
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Criterion()>>> criteria{
      {"hand-eye calibration", hand_eye},
      {"codec and persistence", codec},
      {"fit correctness", fit},
      {"linearization", linearization},
      {"steady-state detection", steady_state},
      {"re-alignment", realignment},
      {"repeatability", repeatability},
      {"operator study", operator_study},
      {"ICC estimator", icc},
  };
  int failures = 0;
  for (const auto& [name, run] : criteria) {
    const auto t0 = Clock::now();
    bool ok = false;
    std::string detail;
    try {
      const auto c = run();
      ok = c.ok();
      detail = c.detail();
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
    }
    failures += !ok;
    std::printf("%s %s (%.1f s): %s\n", ok ? "PASS" : "FAIL", name, seconds_since(t0), detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria failed\n", failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
