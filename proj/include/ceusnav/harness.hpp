#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ceusnav/metrics.hpp"
#include "ceusnav/motionsim.hpp"
#include "ceusnav/quant.hpp"
#include "ceusnav/source.hpp"

namespace ceusnav {

// ---------------------------------------------------------------------------
// Operator study: hold the probe for a fixed time under each feedback method.

inline constexpr std::array<MotionKind, 3> kFeedbackMethods{MotionKind::hold_bmode, MotionKind::hold_tracked,
                                                            MotionKind::hold_blind};

struct OperatorStudyConfig {
  std::size_t operators = 5;
  double duration_s = 240.0;
  std::array<MotionModel, 3> models{MotionModel::defaults(MotionKind::hold_bmode),
                                    MotionModel::defaults(MotionKind::hold_tracked),
                                    MotionModel::defaults(MotionKind::hold_blind)};
  TrackerNoise tracker;
  RigidTransform probe_reference = RigidTransform::from_translation(Vec3(-31.5, -31.5, -31.5));
  GridGeometry image_grid;
  double reposition_duration_s = 60.0;
  double reposition_offset_mm = 25.0;
  double reposition_approach_s = 6.0;
  double settle_threshold_mm = 2.0;
  double settle_hold_s = 2.0;
  std::size_t trace_stride = 6;  // trace CSV decimation (60 Hz / 6 = 10 Hz)
  std::uint64_t seed = 2024;

  void validate() const;
};

nlohmann::json to_json(const OperatorStudyConfig& config);
OperatorStudyConfig operator_study_config_from_json(const nlohmann::json& j);

struct OperatorRun {
  std::size_t operator_id = 0;
  MotionKind method = MotionKind::hold_bmode;
  std::uint64_t seed = 0;
  HistogramFeatures features;
  RepositioningResult reposition;
  DisplacementTrace trace;
};

struct MethodSummary {
  MotionKind method = MotionKind::hold_bmode;
  std::size_t runs = 0;
  double mean = 0.0;  // averages over runs of the per-run feature
  double median = 0.0;
  double sd = 0.0;
  double skewness = 0.0;
  double reposition_error_mm = 0.0;
  double time_to_recovery_s = 0.0;
  std::size_t settled = 0;
};

struct OperatorStudyResult {
  std::vector<OperatorRun> runs;
  std::vector<MethodSummary> summaries;  // in kFeedbackMethods order

  const MethodSummary& summary(MotionKind method) const;
};

OperatorStudyResult run_operator_study(const OperatorStudyConfig& config);
std::string operator_features_csv(const OperatorStudyResult& result);
std::string operator_summary_csv(const OperatorStudyResult& result);
std::string operator_trace_csv(const OperatorRun& run, std::size_t stride);
/// features.csv, summary.csv and, if `traces`, traces/op<i>_<method>.csv.
void write_operator_study(const OperatorStudyResult& result, const OperatorStudyConfig& config,
                          const std::filesystem::path& out_dir, bool traces = true);

// ---------------------------------------------------------------------------
// Quantification of recorded sessions.

struct QuantifyOptions {
  std::optional<Voi> voi;  // default: the lesion from the session header, shrunk
  double voi_shrink = 0.85;
  bool realign = false;
  double fit_span_s = 120.0;
  SteadyStateOptions steady;
  FitOptions fit;
  double dynamic_range_db = 60.0;
};

struct QuantifyRow {
  std::string file;
  std::string patient;
  std::string session;
  std::size_t run = 0;  // 1-based flash index
  double flash_time = 0.0;
  bool realigned = false;
  bool ok = false;
  std::string error;
  FitResult fit;
  SteadyStateReport steady;
  std::size_t samples = 0;
};

/// Linearize → (optional realign) → TIC → steady state → one fit per flash.
/// Failures are reported as rows with ok = false.
std::vector<QuantifyRow> quantify_session(const SessionLog& log, const QuantifyOptions& options,
                                          const std::string& label = "");
std::vector<QuantifyRow> quantify_batch(const std::vector<std::filesystem::path>& files,
                                        const QuantifyOptions& options);
std::string quantify_csv(const std::vector<QuantifyRow>& rows);

/// Lesion VOI of a phantom seen from an image pose.
Voi lesion_voi_at(const PhantomSpec& phantom, const RigidTransform& image_pose, double shrink);

// ---------------------------------------------------------------------------
// Repeatability study: two flashes per virtual patient, fits with and without
// re-alignment, ICC of rBV and rBF.

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct RepeatabilityConfig {
  std::size_t patients = 8;
  SimulationConfig base = default_base();
  Range lesion_level{0.15, 0.6};
  Range lesion_tau_s{40.0, 120.0};
  Range lesion_beta{0.15, 0.5};
  Range breathing_amplitude_mm{1.0, 2.0};
  double fit_span_s = 120.0;
  double voi_shrink = 0.85;
  std::uint64_t seed = 7;

  static SimulationConfig default_base();
  void validate() const;
};

nlohmann::json to_json(const RepeatabilityConfig& config);
RepeatabilityConfig repeatability_config_from_json(const nlohmann::json& j);

struct PatientOutcome {
  std::string patient;
  TissueKinetics lesion;
  std::optional<double> steady_time;
  std::vector<double> flash_times;
  std::vector<QuantifyRow> unaligned;
  std::vector<QuantifyRow> aligned;
  bool usable = false;  // both runs fitted in both conditions
};

struct RepeatabilityReport {
  std::vector<PatientOutcome> patients;
  std::optional<RepeatabilityResult> rbv_unaligned, rbv_aligned, rbf_unaligned, rbf_aligned;
};

/// Simulated session for one patient of the study (stops once the last fit
/// window is complete).
SessionLog simulate_patient(const RepeatabilityConfig& config, std::size_t index, TissueKinetics* lesion = nullptr);
RepeatabilityReport run_repeatability(const RepeatabilityConfig& config);
std::string repeatability_csv(const RepeatabilityReport& report);
std::string repeatability_fits_csv(const RepeatabilityReport& report);
nlohmann::json to_json(const RepeatabilityReport& report);

/// Writes `text` to `path`, creating parent directories.
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace ceusnav
