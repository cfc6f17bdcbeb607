#include "ceusnav/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include "ceusnav/error.hpp"
#include "ceusnav/realign.hpp"

namespace ceusnav {

namespace {

std::string num(double v) {
  std::ostringstream out;
  out << std::setprecision(10) << v;
  return out.str();
}

std::string method_label(MotionKind kind) {
  switch (kind) {
    case MotionKind::hold_bmode: return "bmode";
    case MotionKind::hold_tracked: return "tracked";
    case MotionKind::hold_blind: return "blind";
    default: return std::string(to_string(kind));
  }
}

DisplacementTrace tracked_trace(const MotionModel& model, const TrackerNoise& tracker, const RigidTransform& reference,
                                double duration, const Vec3& center) {
  SessionOptions opts;
  opts.duration_s = duration;
  opts.reference = reference;
  SessionGenerator gen(model, tracker, opts);
  std::vector<TimedPose> poses;
  poses.reserve(gen.sample_count());
  while (auto s = gen.next()) {
    if (s->measured) poses.push_back({s->t, s->measured->marker_pose});
  }
  if (poses.empty()) throw Error(ErrorCode::insufficient_data, "every tracker sample dropped out");
  return displacement_trace(poses, reference, center);
}

}  // namespace

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::io, "write to " + path.string() + " failed");
}

// ---------------------------------------------------------------------------

void OperatorStudyConfig::validate() const {
  if (operators < 1) throw Error(ErrorCode::config, "operator count must be >= 1");
  if (!(duration_s > 0.0) || !(reposition_duration_s > 0.0)) throw Error(ErrorCode::config, "durations must be positive");
  if (!(settle_hold_s < reposition_duration_s)) throw Error(ErrorCode::config, "settle hold must be shorter than the trial");
  if (trace_stride < 1) throw Error(ErrorCode::config, "trace stride must be >= 1");
  for (const auto& m : models) m.validate();
  tracker.validate();
  probe_reference.validate();
  image_grid.validate();
}

nlohmann::json to_json(const OperatorStudyConfig& c) {
  nlohmann::json models = nlohmann::json::object();
  for (std::size_t i = 0; i < kFeedbackMethods.size(); ++i) models[method_label(kFeedbackMethods[i])] = to_json(c.models[i]);
  return {{"study", "operator"},
          {"operators", c.operators},
          {"duration_s", c.duration_s},
          {"models", models},
          {"tracker", to_json(c.tracker)},
          {"probe_reference", to_json(c.probe_reference)},
          {"image_grid", to_json(c.image_grid)},
          {"reposition_duration_s", c.reposition_duration_s},
          {"reposition_offset_mm", c.reposition_offset_mm},
          {"reposition_approach_s", c.reposition_approach_s},
          {"settle_threshold_mm", c.settle_threshold_mm},
          {"settle_hold_s", c.settle_hold_s},
          {"trace_stride", c.trace_stride},
          {"seed", c.seed}};
}

OperatorStudyConfig operator_study_config_from_json(const nlohmann::json& j) {
  OperatorStudyConfig c;
  try {
    c.operators = j.value("operators", c.operators);
    c.duration_s = j.value("duration_s", c.duration_s);
    if (j.contains("models")) {
      for (std::size_t i = 0; i < kFeedbackMethods.size(); ++i) {
        const auto key = method_label(kFeedbackMethods[i]);
        if (!j.at("models").contains(key)) continue;
        auto body = j.at("models").at(key);
        if (!body.contains("kind")) body["kind"] = to_string(kFeedbackMethods[i]);
        c.models[i] = motion_model_from_json(body);
      }
    }
    if (j.contains("tracker")) c.tracker = tracker_noise_from_json(j.at("tracker"));
    if (j.contains("probe_reference")) c.probe_reference = pose_from_json(j.at("probe_reference"));
    if (j.contains("image_grid")) c.image_grid = grid_from_json(j.at("image_grid"));
    c.reposition_duration_s = j.value("reposition_duration_s", c.reposition_duration_s);
    c.reposition_offset_mm = j.value("reposition_offset_mm", c.reposition_offset_mm);
    c.reposition_approach_s = j.value("reposition_approach_s", c.reposition_approach_s);
    c.settle_threshold_mm = j.value("settle_threshold_mm", c.settle_threshold_mm);
    c.settle_hold_s = j.value("settle_hold_s", c.settle_hold_s);
    c.trace_stride = j.value("trace_stride", c.trace_stride);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::config, std::string("malformed operator study config: ") + e.what());
  }
  c.validate();
  return c;
}

const MethodSummary& OperatorStudyResult::summary(MotionKind method) const {
  for (const auto& s : summaries) {
    if (s.method == method) return s;
  }
  throw Error(ErrorCode::invalid_input, "no summary for method");
}

OperatorStudyResult run_operator_study(const OperatorStudyConfig& config) {
  config.validate();
  OperatorStudyResult result;
  const Vec3 center = config.image_grid.center_local();
  for (std::size_t op = 0; op < config.operators; ++op) {
    for (std::size_t m = 0; m < kFeedbackMethods.size(); ++m) {
      OperatorRun run;
      run.operator_id = op + 1;
      run.method = kFeedbackMethods[m];
      run.seed = mix_seed(mix_seed(config.seed, op), m);

      MotionModel hold = config.models[m];
      hold.seed = run.seed;
      run.trace = tracked_trace(hold, config.tracker, config.probe_reference, config.duration_s, center);
      run.features = histogram_features(run.trace);

      MotionModel back = config.models[m];
      back.seed = mix_seed(run.seed, 1);
      back.initial_offset_mm = config.reposition_offset_mm;
      back.approach_time_s = config.reposition_approach_s;
      const auto trial = tracked_trace(back, config.tracker, config.probe_reference, config.reposition_duration_s, center);
      run.reposition = repositioning_result(trial, config.settle_threshold_mm, config.settle_hold_s);
      result.runs.push_back(std::move(run));
    }
  }

  for (auto method : kFeedbackMethods) {
    MethodSummary s;
    s.method = method;
    std::size_t recovered = 0;
    for (const auto& r : result.runs) {
      if (r.method != method) continue;
      ++s.runs;
      s.mean += r.features.mean;
      s.median += r.features.median;
      s.sd += r.features.sd;
      s.skewness += r.features.skewness;
      if (r.reposition.settled) {
        ++recovered;
        s.reposition_error_mm += r.reposition.error_mm;
        s.time_to_recovery_s += r.reposition.time_to_recovery;
      }
    }
    const double n = static_cast<double>(s.runs);
    s.mean /= n;
    s.median /= n;
    s.sd /= n;
    s.skewness /= n;
    s.settled = recovered;
    if (recovered > 0) {
      s.reposition_error_mm /= static_cast<double>(recovered);
      s.time_to_recovery_s /= static_cast<double>(recovered);
    }
    result.summaries.push_back(s);
  }
  return result;
}

std::string operator_features_csv(const OperatorStudyResult& result) {
  std::ostringstream out;
  out << "operator,method,seed,samples,mean_mm,median_mm,sd_mm,skewness,reposition_error_mm,time_to_recovery_s,settled\n";
  for (const auto& r : result.runs) {
    out << r.operator_id << ',' << method_label(r.method) << ',' << r.seed << ',' << r.trace.size() << ','
        << num(r.features.mean) << ',' << num(r.features.median) << ',' << num(r.features.sd) << ','
        << num(r.features.skewness) << ',' << num(r.reposition.error_mm) << ','
        << num(r.reposition.time_to_recovery) << ',' << (r.reposition.settled ? 1 : 0) << '\n';
  }
  return out.str();
}

std::string operator_summary_csv(const OperatorStudyResult& result) {
  std::ostringstream out;
  out << "method,runs,mean_mm,median_mm,sd_mm,skewness,reposition_error_mm,time_to_recovery_s,settled\n";
  for (const auto& s : result.summaries) {
    out << method_label(s.method) << ',' << s.runs << ',' << num(s.mean) << ',' << num(s.median) << ','
        << num(s.sd) << ',' << num(s.skewness) << ',' << num(s.reposition_error_mm) << ','
        << num(s.time_to_recovery_s) << ',' << s.settled << '\n';
  }
  return out.str();
}

std::string operator_trace_csv(const OperatorRun& run, std::size_t stride) {
  std::ostringstream out;
  out << "t_s,displacement_mm\n";
  for (std::size_t i = 0; i < run.trace.size(); i += std::max<std::size_t>(stride, 1)) {
    out << num(run.trace.times[i]) << ',' << num(run.trace.displacement[i]) << '\n';
  }
  return out.str();
}

void write_operator_study(const OperatorStudyResult& result, const OperatorStudyConfig& config,
                          const std::filesystem::path& out_dir, bool traces) {
  write_text(out_dir / "features.csv", operator_features_csv(result));
  write_text(out_dir / "summary.csv", operator_summary_csv(result));
  write_text(out_dir / "config.json", to_json(config).dump(2) + "\n");
  if (!traces) return;
  for (const auto& r : result.runs) {
    const auto name = "op" + std::to_string(r.operator_id) + "_" + method_label(r.method) + ".csv";
    write_text(out_dir / "traces" / name, operator_trace_csv(r, config.trace_stride));
  }
}

// ---------------------------------------------------------------------------

Voi lesion_voi_at(const PhantomSpec& phantom, const RigidTransform& image_pose, double shrink) {
  const EllipsoidPrimitive* lesion = nullptr;
  for (const auto& p : phantom.primitives) {
    if (const auto* e = std::get_if<EllipsoidPrimitive>(&p); e && e->tissue == Tissue::lesion) lesion = e;
  }
  if (!lesion) throw Error(ErrorCode::config, "phantom has no lesion");
  return Voi::ellipsoid(image_pose.inverse().apply(lesion->center_mm), lesion->radii_mm * shrink);
}

namespace {

std::string header_string(const nlohmann::json& header, const char* key, const std::string& fallback) {
  if (!header.contains(key)) return fallback;
  const auto& v = header.at(key);
  return v.is_string() ? v.get<std::string>() : v.dump();
}

}  // namespace

std::vector<QuantifyRow> quantify_session(const SessionLog& log, const QuantifyOptions& options,
                                          const std::string& label) {
  std::vector<VolumeFrame> frames;
  std::vector<double> flashes;
  for (const auto& m : log.messages) {
    if (m.kind == MessageKind::frame) {
      frames.push_back(to_volume_frame(m));
    } else if (m.kind == MessageKind::control &&
               std::get<ControlPayload>(m.payload).event() == control_event::flash) {
      flashes.push_back(m.time_s());
    }
  }
  std::sort(flashes.begin(), flashes.end());

  QuantifyRow proto;
  proto.file = label;
  proto.patient = header_string(log.config, "patient", label);
  proto.session = header_string(log.config, "session", "1");
  proto.realigned = options.realign;

  std::vector<QuantifyRow> rows;
  auto fail_all = [&](const std::string& why) {
    if (flashes.empty()) {
      QuantifyRow r = proto;
      r.error = why;
      rows.push_back(r);
    }
    for (std::size_t k = 0; k < flashes.size(); ++k) {
      QuantifyRow r = proto;
      r.run = k + 1;
      r.flash_time = flashes[k];
      r.error = why;
      rows.push_back(r);
    }
    return rows;
  };
  if (frames.empty()) return fail_all("session has no frames");

  auto window_end = [&](std::size_t k) {
    double end = flashes[k] + options.fit_span_s;
    if (k + 1 < flashes.size()) end = std::min(end, flashes[k + 1]);
    return end;
  };
  auto in_fit_window = [&](double t) {
    for (std::size_t k = 0; k < flashes.size(); ++k) {
      if (t >= flashes[k] && t < window_end(k)) return true;
    }
    return false;
  };

  std::optional<PhantomSpec> phantom;
  if (!options.voi) {
    if (!log.config.contains("phantom")) return fail_all("no VOI given and the session header has no phantom");
    phantom = phantom_spec_from_json(log.config.at("phantom"));
  }

  try {
    TimeIntensityCurve tic;
    SteadyStateReport steady;
    steady.window_s = options.steady.window_s;
    steady.slope_tolerance = options.steady.slope_tolerance;

    // Raw TIC for the steady-state report (and the fits when not realigning).
    {
      Voi voi = options.voi ? *options.voi
                            : lesion_voi_at(*phantom,
                                            log.config.contains("probe_reference")
                                                ? pose_from_json(log.config.at("probe_reference"))
                                                : frames.front().pose.value_or(RigidTransform::identity()),
                                            options.voi_shrink);
      tic = extract_tic(frames, voi, options.dynamic_range_db);
      const double stop = flashes.empty() ? tic.times.back() : flashes.front();
      const auto infusion = tic.slice(tic.times.front(), stop - 1e-9);
      try {
        steady = detect_steady_state(infusion, options.steady);
      } catch (const Error&) {
        // too short to judge: not reached
      }
    }

    if (options.realign) {
      std::vector<VolumeFrame> subset;
      std::optional<std::size_t> ref;
      for (const auto& f : frames) {
        if (!in_fit_window(f.timestamp)) continue;
        if (!ref && f.pose) ref = subset.size();
        subset.push_back(f);
      }
      if (!ref) return fail_all("no tracked pose available for re-alignment");
      const auto aligned = realign_sequence(subset, *ref);
      const Voi voi =
          options.voi ? *options.voi : lesion_voi_at(*phantom, *subset[*ref].pose, options.voi_shrink);
      tic = extract_tic(aligned.frames, voi, options.dynamic_range_db, aligned.masks);
    }

    if (flashes.empty()) {
      QuantifyRow r = proto;
      r.steady = steady;
      r.samples = tic.size();
      r.error = "no flash in session";
      rows.push_back(r);
      return rows;
    }

    for (std::size_t k = 0; k < flashes.size(); ++k) {
      QuantifyRow r = proto;
      r.run = k + 1;
      r.flash_time = flashes[k];
      r.steady = steady;
      try {
        const std::optional<double> next = k + 1 < flashes.size() ? std::optional(flashes[k + 1]) : std::nullopt;
        const auto segment = replenishment_segment(tic, flashes[k], options.fit_span_s, next);
        r.samples = segment.size();
        FitOptions fit = options.fit;
        fit.t0 = flashes[k];
        r.fit = fit_replenishment(segment, fit);
        r.ok = true;
      } catch (const Error& e) {
        r.error = e.what();
      }
      rows.push_back(r);
    }
  } catch (const Error& e) {
    rows.clear();
    return fail_all(e.what());
  }
  return rows;
}

std::vector<QuantifyRow> quantify_batch(const std::vector<std::filesystem::path>& files,
                                        const QuantifyOptions& options) {
  std::vector<QuantifyRow> rows;
  for (const auto& path : files) {
    std::vector<QuantifyRow> part;
    try {
      part = quantify_session(read_session(path), options, path.filename().string());
    } catch (const Error& e) {
      QuantifyRow r;
      r.file = path.filename().string();
      r.patient = r.file;
      r.realigned = options.realign;
      r.error = e.what();
      part.push_back(r);
    }
    rows.insert(rows.end(), part.begin(), part.end());
  }
  return rows;
}

std::string quantify_csv(const std::vector<QuantifyRow>& rows) {
  std::ostringstream out;
  out << "file,patient,session,run,flash_s,realigned,ok,rBV,rBF,beta,r2,rms_residual,samples,at_bound,"
         "degenerate,steady_reached,time_to_steady_s,error\n";
  for (const auto& r : rows) {
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    out << r.file << ',' << r.patient << ',' << r.session << ',' << r.run << ',' << num(r.flash_time) << ','
        << (r.realigned ? 1 : 0) << ',' << (r.ok ? 1 : 0) << ',' << num(r.fit.rBV) << ',' << num(r.fit.rBF) << ','
        << num(r.fit.beta) << ',' << num(r.fit.r_squared) << ',' << num(r.fit.rms_residual) << ',' << r.samples
        << ',' << (r.fit.at_bound ? 1 : 0) << ',' << (r.fit.degenerate ? 1 : 0) << ','
        << (r.steady.reached ? 1 : 0) << ',' << num(r.steady.time_to_steady) << ',' << err << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------

SimulationConfig RepeatabilityConfig::default_base() {
  SimulationConfig c;
  c.motion = MotionModel::defaults(MotionKind::breathing);
  c.motion.drift_rate_mm_per_min = 1.5;
  c.motion.jitter_sd_mm = 0.5;
  c.motion.reversion_rate_per_s = 0.2;
  c.motion.rot_jitter_sd_deg = 0.3;
  c.duration_s = 480.0;
  c.auto_flash = true;
  c.flash_count = 2;
  c.flash_spacing_s = 150.0;
  c.emit_tracker = false;
  return c;
}

void RepeatabilityConfig::validate() const {
  if (patients < 3) throw Error(ErrorCode::config, "repeatability needs at least 3 patients");
  for (const auto& r : {lesion_level, lesion_tau_s, lesion_beta, breathing_amplitude_mm}) {
    if (!(r.lo <= r.hi) || r.lo < 0.0) throw Error(ErrorCode::config, "invalid parameter range");
  }
  if (!(lesion_level.lo > 0.0 && lesion_level.hi <= 1.0)) throw Error(ErrorCode::config, "lesion level must be in (0,1]");
  if (!(lesion_tau_s.lo > 0.0 && lesion_beta.lo > 0.0)) throw Error(ErrorCode::config, "kinetic ranges must be positive");
  if (!(fit_span_s > 0.0) || !(voi_shrink > 0.0)) throw Error(ErrorCode::config, "fit span and VOI shrink must be positive");
  base.validate();
}

namespace {

nlohmann::json range_json(const Range& r) { return {r.lo, r.hi}; }

Range range_from(const nlohmann::json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

}  // namespace

nlohmann::json to_json(const RepeatabilityConfig& c) {
  return {{"study", "repeatability"},
          {"patients", c.patients},
          {"base", to_json(c.base)},
          {"lesion_level", range_json(c.lesion_level)},
          {"lesion_tau_s", range_json(c.lesion_tau_s)},
          {"lesion_beta", range_json(c.lesion_beta)},
          {"breathing_amplitude_mm", range_json(c.breathing_amplitude_mm)},
          {"fit_span_s", c.fit_span_s},
          {"voi_shrink", c.voi_shrink},
          {"seed", c.seed}};
}

RepeatabilityConfig repeatability_config_from_json(const nlohmann::json& j) {
  RepeatabilityConfig c;
  try {
    c.patients = j.value("patients", c.patients);
    if (j.contains("base")) {
      nlohmann::json merged = to_json(c.base);
      merged.merge_patch(j.at("base"));
      c.base = simulation_config_from_json(merged);
    }
    if (j.contains("lesion_level")) c.lesion_level = range_from(j.at("lesion_level"));
    if (j.contains("lesion_tau_s")) c.lesion_tau_s = range_from(j.at("lesion_tau_s"));
    if (j.contains("lesion_beta")) c.lesion_beta = range_from(j.at("lesion_beta"));
    if (j.contains("breathing_amplitude_mm")) c.breathing_amplitude_mm = range_from(j.at("breathing_amplitude_mm"));
    c.fit_span_s = j.value("fit_span_s", c.fit_span_s);
    c.voi_shrink = j.value("voi_shrink", c.voi_shrink);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::config, std::string("malformed repeatability config: ") + e.what());
  }
  c.validate();
  return c;
}

SessionLog simulate_patient(const RepeatabilityConfig& config, std::size_t index, TissueKinetics* lesion_out) {
  SimulationConfig sim = config.base;
  sim.seed = mix_seed(config.seed, index);
  sim.motion.seed = mix_seed(sim.seed, 0x6d6f74696f6eULL);

  std::mt19937_64 rng(mix_seed(sim.seed, 0x6b696e6574ULL));
  auto draw = [&](const Range& r) { return std::uniform_real_distribution<double>(r.lo, r.hi)(rng); };
  TissueKinetics& lesion = sim.phantom.kinetics[Tissue::lesion];
  lesion.steady_level = draw(config.lesion_level);
  lesion.infusion_tau_s = draw(config.lesion_tau_s);
  lesion.replenishment_beta = draw(config.lesion_beta);
  const double amplitude = draw(config.breathing_amplitude_mm);
  if (sim.motion.breathing_amplitude_mm > 0.0) sim.motion.breathing_amplitude_mm = amplitude;
  if (lesion_out) *lesion_out = lesion;

  LiveSimulationSource source(sim);
  SessionLog log;
  log.config = source.header();
  char name[16];
  std::snprintf(name, sizeof name, "P%02zu", index + 1);
  log.config["patient"] = name;
  log.config["session"] = "1";
  while (auto m = source.next()) {
    log.messages.push_back(std::move(*m));
    const auto& f = source.flash_times();
    if (f.size() >= sim.flash_count && source.current_time() >= f.back() + config.fit_span_s) break;
  }
  return log;
}

RepeatabilityReport run_repeatability(const RepeatabilityConfig& config) {
  config.validate();
  RepeatabilityReport report;
  std::vector<MeasurementPair> rbv_u, rbv_a, rbf_u, rbf_a;

  for (std::size_t p = 0; p < config.patients; ++p) {
    PatientOutcome out;
    const SessionLog log = simulate_patient(config, p, &out.lesion);
    out.patient = log.config.at("patient").get<std::string>();
    for (const auto& m : log.messages) {
      if (m.kind == MessageKind::control && std::get<ControlPayload>(m.payload).event() == control_event::flash) {
        out.flash_times.push_back(m.time_s());
      }
    }

    QuantifyOptions q;
    q.voi_shrink = config.voi_shrink;
    q.fit_span_s = config.fit_span_s;
    q.steady = config.base.steady;
    q.dynamic_range_db = config.base.render.dynamic_range_db;
    out.unaligned = quantify_session(log, q, out.patient);
    q.realign = true;
    out.aligned = quantify_session(log, q, out.patient);
    if (!out.unaligned.empty() && out.unaligned.front().steady.reached) {
      out.steady_time = out.unaligned.front().steady.time_to_steady;
    }

    auto good = [](const std::vector<QuantifyRow>& rows) {
      return rows.size() >= 2 && rows[0].ok && rows[1].ok && rows[0].fit.rBV > 0.0 && rows[1].fit.rBV > 0.0 &&
             rows[0].fit.rBF > 0.0 && rows[1].fit.rBF > 0.0;
    };
    out.usable = good(out.unaligned) && good(out.aligned);
    if (out.usable) {
      rbv_u.push_back({out.patient, out.unaligned[0].fit.rBV, out.unaligned[1].fit.rBV});
      rbf_u.push_back({out.patient, out.unaligned[0].fit.rBF, out.unaligned[1].fit.rBF});
      rbv_a.push_back({out.patient, out.aligned[0].fit.rBV, out.aligned[1].fit.rBV});
      rbf_a.push_back({out.patient, out.aligned[0].fit.rBF, out.aligned[1].fit.rBF});
    }
    report.patients.push_back(std::move(out));
  }

  if (rbv_u.size() >= 3) {
    report.rbv_unaligned = icc_pairs(rbv_u);
    report.rbv_aligned = icc_pairs(rbv_a);
    report.rbf_unaligned = icc_pairs(rbf_u);
    report.rbf_aligned = icc_pairs(rbf_a);
  }
  return report;
}

std::string repeatability_csv(const RepeatabilityReport& report) {
  std::ostringstream out;
  out << "parameter,condition,icc,ci_low,ci_high,band,n_pairs\n";
  auto row = [&](const char* param, const char* cond, const std::optional<RepeatabilityResult>& r) {
    out << param << ',' << cond << ',';
    if (r) {
      out << num(r->icc) << ',' << num(r->ci_low) << ',' << num(r->ci_high) << ',' << to_string(r->band) << ','
          << r->n_pairs << '\n';
    } else {
      out << ",,,,0\n";
    }
  };
  row("rBF", "unaligned", report.rbf_unaligned);
  row("rBF", "aligned", report.rbf_aligned);
  row("rBV", "unaligned", report.rbv_unaligned);
  row("rBV", "aligned", report.rbv_aligned);
  return out.str();
}

std::string repeatability_fits_csv(const RepeatabilityReport& report) {
  std::vector<QuantifyRow> rows;
  for (const auto& p : report.patients) {
    rows.insert(rows.end(), p.unaligned.begin(), p.unaligned.end());
    rows.insert(rows.end(), p.aligned.begin(), p.aligned.end());
  }
  return quantify_csv(rows);
}

nlohmann::json to_json(const RepeatabilityReport& report) {
  auto icc = [](const std::optional<RepeatabilityResult>& r) -> nlohmann::json {
    if (!r) return nullptr;
    return {{"icc", r->icc}, {"ci95", {r->ci_low, r->ci_high}}, {"band", to_string(r->band)}, {"n_pairs", r->n_pairs}};
  };
  nlohmann::json patients = nlohmann::json::array();
  for (const auto& p : report.patients) {
    patients.push_back({{"patient", p.patient},
                        {"lesion_steady_level", p.lesion.steady_level},
                        {"lesion_tau_s", p.lesion.infusion_tau_s},
                        {"lesion_beta", p.lesion.replenishment_beta},
                        {"steady_time_s", p.steady_time ? nlohmann::json(*p.steady_time) : nlohmann::json(nullptr)},
                        {"flash_times_s", p.flash_times},
                        {"usable", p.usable}});
  }
  return {{"rBF", {{"unaligned", icc(report.rbf_unaligned)}, {"aligned", icc(report.rbf_aligned)}}},
          {"rBV", {{"unaligned", icc(report.rbv_unaligned)}, {"aligned", icc(report.rbv_aligned)}}},
          {"patients", patients}};
}

}  // namespace ceusnav
