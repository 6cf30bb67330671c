#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "neuropipe/classifier.hpp"
#include "neuropipe/detector.hpp"
#include "neuropipe/metrics.hpp"
#include "neuropipe/segmenter.hpp"

namespace neuropipe {

// Flat `key = value` lines; '#' starts a comment, keys use dotted sections.
class Config {
 public:
  static Config parse(std::string_view text, const std::string& origin = "<text>");  // ParseError
  static Config load(const std::filesystem::path& path);  // IoFailure naming the path, ParseError

  void set(const std::string& key, const std::string& value);
  // "key=value" as given on the command line. ParseError.
  void apply_override(const std::string& assignment);

  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  std::string str(const std::string& key, const std::string& fallback) const;
  int integer(const std::string& key, int fallback) const;
  double real(const std::string& key, double fallback) const;
  bool flag(const std::string& key, bool fallback) const;
  std::vector<int> integers(const std::string& key, const std::vector<int>& fallback) const;
  std::vector<double> reals(const std::string& key, const std::vector<double>& fallback) const;
  std::vector<std::string> strings(const std::string& key, const std::vector<std::string>& fallback) const;

  // BadConfig naming every key no accessor has read.
  void check_all_used() const;
  const std::map<std::string, std::string>& entries() const { return entries_; }
  std::string text() const;  // sorted, one `key = value` per line

 private:
  const std::string* find(const std::string& key) const;

  std::map<std::string, std::string> entries_;
  mutable std::set<std::string> used_;
};

enum class Task { Classify, Detect, Segment };
std::string_view task_name(Task t);

struct RunConfig {
  Task task = Task::Classify;
  std::filesystem::path manifest;
  std::string train_split = "train";
  std::string eval_split = "test";  // falls back to the training split when empty on disk
  std::vector<Modality> modalities{Modality::T1, Modality::T1c, Modality::T2, Modality::FLAIR};
  std::filesystem::path output_dir = "neuropipe_out";
  bool plot = false;
  TrainOptions train;
  ClassifierConfig classifier;
  DetectorConfig detector;
  SegmenterConfig segmenter;
  SyntheticSpec synthetic;
  int synthetic_cases = 25;
  std::vector<double> synthetic_fractions{0.8, 0.2};

  void validate() const;
};

// Reads every known key (defaults for absent ones), rejects unknown keys, and
// applies NEUROPIPE_OUT to the output directory.
RunConfig resolve_run_config(const Config& cfg);
// Every resolved value; resolve_run_config(echo_config(rc)) reproduces rc.
Config echo_config(const RunConfig& rc);

// History file: header then one flushed row per call.
class HistoryLogger {
 public:
  explicit HistoryLogger(const std::filesystem::path& path);  // IoFailure
  void append(const HistoryRow& row);

 private:
  std::filesystem::path path_;
};
TrainHistory read_history(const std::filesystem::path& path);  // ParseError
void write_history_plot(const TrainHistory& history, const std::filesystem::path& svg_path);

// Text header lines followed by raw little-endian float64 tensor blobs.
struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor>> tensors;
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};
void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);  // IoFailure, ParseError
Checkpoint snapshot(const std::vector<Parameter*>& params, std::map<std::string, std::string> meta = {});
// BadConfig when names or shapes differ from the model's.
void restore(const Checkpoint& ckpt, const std::vector<Parameter*>& params);

struct DetectionRecord {
  std::string subject_id;
  int slice_index = 0;
  int rank = 0;
  int category = 1;
  double score = 0;
  BoundingBox box;
  friend bool operator==(const DetectionRecord&, const DetectionRecord&) = default;
};
void write_detection_records(const std::vector<DetectionRecord>& records, const std::filesystem::path& path);
std::vector<DetectionRecord> read_detection_records(const std::filesystem::path& path);

struct InstanceRecord {
  std::string subject_id;
  int slice_index = 0;
  int instance = 0;
  std::string region;
  double score = 0;
  BoundingBox box;
  std::string rle;
  friend bool operator==(const InstanceRecord&, const InstanceRecord&) = default;
};
void write_instance_records(const std::vector<InstanceRecord>& records, const std::filesystem::path& path);
std::vector<InstanceRecord> read_instance_records(const std::filesystem::path& path);

// Samples of one manifest split ("" = all rows).
std::vector<ClassifierSample> classifier_samples(const RunConfig& rc, const std::string& split);
std::vector<DetectionSample> detection_samples(const RunConfig& rc, const std::string& split);
std::vector<SegmentationSample> segmentation_samples(const RunConfig& rc, const std::string& split);

struct RunOutputs {
  std::filesystem::path dir, config, history, checkpoint, plot;
  TrainHistory history_rows;
};
RunOutputs run_train(const RunConfig& rc);
// Writes metrics.csv from the checkpoint in the output directory.
MetricsReport run_evaluate(const RunConfig& rc);
// Writes predictions.csv, detections.csv or instances.csv; returns its path.
std::filesystem::path run_predict(const RunConfig& rc);
std::filesystem::path run_generate_data(const RunConfig& rc);

// Rasterizes boxes into a (1, H, W) mask (pixels whose centres lie inside).
Tensor box_mask(const std::vector<BoundingBox>& boxes, int height, int width);

struct AblationRow {
  std::set<Modality> subset;
  double dice_pooled = 0;      // over all pixels of all evaluation slices
  double dice_mean_slice = 0;  // mean of per-slice Dice
};
struct AblationTable {
  std::vector<AblationRow> rows;
  // Columns T1, T1c, T2, F/D with x / - marks, then both Dice values.
  void write(std::ostream& out) const;
};
// The nine modality subsets of the standard ablation table, in row order.
std::vector<std::set<Modality>> table3_subsets();
// Trains and evaluates one detector or segmenter per subset, each from the
// same seed; writes ablation.csv. EmptySubset, BadConfig for classify.
AblationTable run_ablation(const RunConfig& rc, const std::vector<std::set<Modality>>& subsets);

}  // namespace neuropipe
