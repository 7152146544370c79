#pragma once

#include <string>
#include <vector>

#include "core/types.hpp"

namespace mf {

struct RejectionRecord {
    std::string case_id;
    std::string reason;
};

struct LoadReport {
    std::vector<RejectionRecord> rejections;
};

struct LoadedDataset {
    std::vector<Exam> exams;
    LoadReport report;
};

// Reads the manifest CSV described in the README. Rows sharing a case_id are
// merged into one Exam; cases with fewer than four views are dropped and
// recorded in the load report.
LoadedDataset load_manifest(const std::string& path);

// Writes `exams` back out as a manifest (paths must already be valid).
void write_manifest(const std::string& path, const std::vector<Exam>& exams);

CaseLabels derive_case_labels(const Exam& exam);

// Tightest box around the foreground (non-zero) pixels of a mask.
BBox bounding_box_from_mask(const Image& mask);

struct SplitRatios {
    double train = 0.8;
    double validation = 0.1;
    double test = 0.1;
};

enum class StrataKey { density, lesion_category, pathology_category };

StrataKey parse_strata_key(const std::string& s);

struct SplitWarning {
    std::string stratum;
    std::string message;
};

struct SplitResult {
    DatasetSplit split;
    std::vector<SplitWarning> warnings;
};

// Case-level stratified split. Per joint stratum, split counts follow
// largest-remainder apportionment of the target ratios; cases carrying a
// preassigned split keep it and only the remainder is distributed. Strata
// smaller than the number of splits fall back to a pooled global
// apportionment and emit a warning.
SplitResult split_dataset(const std::vector<Exam>& dataset, const SplitRatios& ratios,
                          const std::vector<StrataKey>& strata_keys, std::uint64_t seed);

// Joint stratum label used in split reports, e.g. "density=b|lesion=mass".
std::string stratum_label(const CaseLabels& labels, const Exam& exam,
                          const std::vector<StrataKey>& strata_keys);

}  // namespace mf
