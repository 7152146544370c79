#include "core/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "core/errors.hpp"
#include "core/csv.hpp"
#include "core/rng.hpp"
#include "core/strutil.hpp"

namespace mf {

namespace {

const std::vector<std::string> kManifestColumns = {
    "case_id", "view",      "image_path", "density", "row_kind",          "lesion_type",
    "pathology", "x_min",   "y_min",      "x_max",   "y_max", "preassigned_split"};

struct ManifestIndex {
    std::map<std::string, int> col;
    int of(const std::string& name) const { return col.at(name); }
};

ManifestIndex index_header(const CsvRow& header, const std::string& path) {
    ManifestIndex idx;
    for (std::size_t i = 0; i < header.size(); ++i) idx.col[trim(header[i])] = static_cast<int>(i);
    for (const auto& name : kManifestColumns) {
        if (name == "preassigned_split") continue;  // optional column
        if (!idx.col.count(name)) {
            throw DataError("manifest " + path + " is missing column '" + name + "'");
        }
    }
    return idx;
}

}  // namespace

LoadedDataset load_manifest(const std::string& path) {
    auto rows = read_csv(path);
    if (rows.empty()) throw DataError("manifest is empty: " + path);
    ManifestIndex idx = index_header(rows[0], path);
    bool has_preassigned = idx.col.count("preassigned_split") != 0;

    std::filesystem::path base = std::filesystem::path(path).parent_path();

    struct PendingCase {
        Exam exam;
        std::set<int> views_seen;
        std::vector<std::pair<ViewKey, LesionAnnotation>> lesions;
        bool density_set = false;
    };
    std::map<std::string, PendingCase> cases;  // ordered by case_id
    std::vector<std::string> case_order;

    auto field = [&](const CsvRow& row, const std::string& name) -> std::string {
        int c = idx.of(name);
        return c < static_cast<int>(row.size()) ? trim(row[c]) : std::string();
    };

    for (std::size_t r = 1; r < rows.size(); ++r) {
        const CsvRow& row = rows[r];
        if (row.size() == 1 && row[0].empty()) continue;
        std::string case_id = field(row, "case_id");
        if (case_id.empty()) throw DataError("manifest row " + std::to_string(r + 1) + " has empty case_id");
        std::string kind = field(row, "row_kind");
        ViewKey view = parse_view(field(row, "view"));

        if (!cases.count(case_id)) case_order.push_back(case_id);
        PendingCase& pc = cases[case_id];
        pc.exam.case_id = case_id;

        if (kind == "view") {
            if (pc.views_seen.count(view.index())) {
                throw DataError("duplicate (case_id, view) in manifest: " + case_id + ", " + to_string(view));
            }
            pc.views_seen.insert(view.index());
            std::string image_path = field(row, "image_path");
            if (image_path.empty()) {
                throw DataError("view row without image_path for case " + case_id);
            }
            std::filesystem::path p(image_path);
            if (p.is_relative()) p = base / p;
            if (!std::filesystem::exists(p)) {
                throw DataError("referenced image file does not exist: " + p.string());
            }
            pc.exam.image(view).path = p.string();
            std::string density = field(row, "density");
            if (!density.empty()) {
                pc.exam.density = parse_density(density);
                pc.density_set = true;
            }
            if (has_preassigned) {
                std::string pre = field(row, "preassigned_split");
                if (pre == "train") pc.exam.preassigned_split = SplitName::train;
                else if (pre == "test") pc.exam.preassigned_split = SplitName::test;
                else if (!pre.empty()) throw DataError("invalid preassigned_split '" + pre + "' for case " + case_id);
            }
        } else if (kind == "lesion") {
            LesionAnnotation l;
            l.view = view;
            l.lesion_type = parse_lesion_type(field(row, "lesion_type"));
            l.pathology = parse_pathology(field(row, "pathology"));
            l.box.x_min = parse_double(field(row, "x_min"), "x_min");
            l.box.y_min = parse_double(field(row, "y_min"), "y_min");
            l.box.x_max = parse_double(field(row, "x_max"), "x_max");
            l.box.y_max = parse_double(field(row, "y_max"), "y_max");
            if (!l.box.valid() || l.box.x_min < 0 || l.box.y_min < 0) {
                throw DataError("invalid lesion box for case " + case_id + " view " + to_string(view));
            }
            pc.lesions.emplace_back(view, l);
        } else {
            throw DataError("unknown row_kind '" + kind + "' in manifest row " + std::to_string(r + 1));
        }
    }

    LoadedDataset out;
    for (const std::string& case_id : case_order) {
        PendingCase& pc = cases[case_id];
        if (pc.views_seen.size() < kNumViews) {
            out.report.rejections.push_back({case_id, "incomplete"});
            continue;
        }
        if (!pc.density_set) {
            out.report.rejections.push_back({case_id, "missing density"});
            continue;
        }
        for (auto& [view, lesion] : pc.lesions) pc.exam.lesions.push_back(lesion);
        out.exams.push_back(std::move(pc.exam));
    }
    return out;
}

void write_manifest(const std::string& path, const std::vector<Exam>& exams) {
    std::vector<CsvRow> rows;
    rows.push_back(kManifestColumns);
    for (const Exam& e : exams) {
        std::string pre;
        if (e.preassigned_split) {
            pre = *e.preassigned_split == SplitName::train ? "train" : "test";
        }
        for (ViewKey v : all_views()) {
            rows.push_back({e.case_id, to_string(v), e.image(v).path, to_string(e.density), "view", "",
                            "", "", "", "", "", pre});
        }
        for (const LesionAnnotation& l : e.lesions) {
            rows.push_back({e.case_id, to_string(l.view), "", "", "lesion", to_string(l.lesion_type),
                            to_string(l.pathology), format_double(l.box.x_min), format_double(l.box.y_min),
                            format_double(l.box.x_max), format_double(l.box.y_max), ""});
        }
    }
    write_csv(path, rows);
}

CaseLabels derive_case_labels(const Exam& exam) {
    CaseLabels labels;
    labels.density_super = (exam.density == DensityClass::a || exam.density == DensityClass::b)
                               ? DensitySuper::fatty
                               : DensitySuper::dense;
    labels.has_lesion = !exam.lesions.empty();
    bool any_mass = false, any_calc = false;
    for (const auto& l : exam.lesions) {
        if (l.pathology == Pathology::malignant) labels.is_malignant = true;
        if (l.lesion_type == LesionType::mass) any_mass = true;
        else any_calc = true;
    }
    // Mass takes precedence when a case carries both lesion types.
    labels.lesion_category = any_mass ? LesionCategory::mass
                             : any_calc ? LesionCategory::calcification
                                        : LesionCategory::normal;
    labels.pathology_category = labels.is_malignant ? PathologyCategory::malignant
                                : labels.has_lesion ? PathologyCategory::benign
                                                    : PathologyCategory::normal;
    return labels;
}

BBox bounding_box_from_mask(const Image& mask) {
    int min_x = mask.width, min_y = mask.height, max_x = -1, max_y = -1;
    for (int y = 0; y < mask.height; ++y) {
        for (int x = 0; x < mask.width; ++x) {
            if (mask.at(y, x) != 0.0) {
                min_x = std::min(min_x, x);
                max_x = std::max(max_x, x);
                min_y = std::min(min_y, y);
                max_y = std::max(max_y, y);
            }
        }
    }
    if (max_x < 0) throw DataError("empty lesion mask");
    return BBox{static_cast<double>(min_x), static_cast<double>(min_y),
                static_cast<double>(max_x + 1), static_cast<double>(max_y + 1)};
}

StrataKey parse_strata_key(const std::string& s) {
    if (s == "density") return StrataKey::density;
    if (s == "lesion_category") return StrataKey::lesion_category;
    if (s == "pathology_category") return StrataKey::pathology_category;
    throw ConfigError("unknown strata key '" + s +
                      "' (expected density, lesion_category or pathology_category)");
}

std::string stratum_label(const CaseLabels& labels, const Exam& exam,
                          const std::vector<StrataKey>& strata_keys) {
    std::string out;
    for (StrataKey k : strata_keys) {
        if (!out.empty()) out += '|';
        switch (k) {
            case StrataKey::density: out += "density=" + to_string(exam.density); break;
            case StrataKey::lesion_category: out += "lesion=" + to_string(labels.lesion_category); break;
            case StrataKey::pathology_category:
                out += "pathology=" + to_string(labels.pathology_category);
                break;
        }
    }
    if (out.empty()) out = "all";
    return out;
}

namespace {

constexpr int kNumSplits = 3;

// Largest-remainder apportionment of `total` items to 3 quotas.
std::array<int, kNumSplits> apportion(const std::array<double, kNumSplits>& quota, int total) {
    std::array<int, kNumSplits> counts{};
    std::array<double, kNumSplits> frac{};
    int assigned = 0;
    for (int s = 0; s < kNumSplits; ++s) {
        counts[s] = static_cast<int>(std::floor(quota[s]));
        frac[s] = quota[s] - counts[s];
        assigned += counts[s];
    }
    int remaining = total - assigned;
    std::array<int, kNumSplits> order = {0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frac[a] > frac[b]; });
    for (int i = 0; i < remaining; ++i) counts[order[i % kNumSplits]] += 1;
    return counts;
}

struct StratumState {
    std::vector<int> unassigned;               // indices into dataset
    std::array<int, kNumSplits> preassigned{}; // counts already fixed
    int size = 0;
};

}  // namespace

SplitResult split_dataset(const std::vector<Exam>& dataset, const SplitRatios& ratios,
                          const std::vector<StrataKey>& strata_keys, std::uint64_t seed) {
    const std::array<double, kNumSplits> ratio = {ratios.train, ratios.validation, ratios.test};
    double sum = ratio[0] + ratio[1] + ratio[2];
    for (double r : ratio) {
        if (r <= 0) throw ConfigError("split ratios must be positive");
    }
    if (std::fabs(sum - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");

    {
        std::set<std::string> ids;
        for (const Exam& e : dataset) {
            if (!ids.insert(e.case_id).second) throw DataError("duplicate case_id: " + e.case_id);
        }
    }

    SplitResult result;
    Rng rng(seed);

    // Group case indices per joint stratum, deterministically keyed.
    std::map<std::string, StratumState> strata;
    auto assign = [&](int exam_idx, SplitName s) {
        result.split.of(s).push_back(dataset[exam_idx].case_id);
    };

    for (std::size_t i = 0; i < dataset.size(); ++i) {
        CaseLabels labels = derive_case_labels(dataset[i]);
        std::string key = stratum_label(labels, dataset[i], strata_keys);
        StratumState& st = strata[key];
        st.size += 1;
        if (dataset[i].preassigned_split) {
            st.preassigned[static_cast<int>(*dataset[i].preassigned_split)] += 1;
            assign(static_cast<int>(i), *dataset[i].preassigned_split);
        } else {
            st.unassigned.push_back(static_cast<int>(i));
        }
    }

    std::vector<int> pooled;  // cases from strata too small to apportion
    for (auto& [key, st] : strata) {
        // Keep unassigned order stable before shuffling: sort by case id.
        std::sort(st.unassigned.begin(), st.unassigned.end(), [&](int a, int b) {
            return dataset[a].case_id < dataset[b].case_id;
        });
        if (st.size < kNumSplits) {
            result.warnings.push_back({key, "stratum of size " + std::to_string(st.size) +
                                                " is smaller than the number of splits; assigned by global ratio"});
            pooled.insert(pooled.end(), st.unassigned.begin(), st.unassigned.end());
            continue;
        }
        Rng local = rng.fork(rng_tag(key.c_str()));
        local.shuffle(st.unassigned);

        int free_count = static_cast<int>(st.unassigned.size());
        std::array<double, kNumSplits> quota{};
        double quota_sum = 0.0;
        for (int s = 0; s < kNumSplits; ++s) {
            quota[s] = std::max(0.0, ratio[s] * st.size - st.preassigned[s]);
            quota_sum += quota[s];
        }
        if (free_count > 0) {
            if (quota_sum <= 0) {
                for (int s = 0; s < kNumSplits; ++s) quota[s] = ratio[s];
                quota_sum = 1.0;
            }
            for (int s = 0; s < kNumSplits; ++s) quota[s] *= free_count / quota_sum;
            std::array<int, kNumSplits> counts = apportion(quota, free_count);
            int cursor = 0;
            for (int s = 0; s < kNumSplits; ++s) {
                for (int c = 0; c < counts[s]; ++c) {
                    assign(st.unassigned[cursor++], static_cast<SplitName>(s));
                }
            }
        }
    }

    if (!pooled.empty()) {
        std::sort(pooled.begin(), pooled.end(), [&](int a, int b) {
            return dataset[a].case_id < dataset[b].case_id;
        });
        Rng local = rng.fork(rng_tag("pooled-small-strata"));
        local.shuffle(pooled);
        int total = static_cast<int>(pooled.size());
        std::array<double, kNumSplits> quota = {ratio[0] * total, ratio[1] * total, ratio[2] * total};
        std::array<int, kNumSplits> counts = apportion(quota, total);
        int cursor = 0;
        for (int s = 0; s < kNumSplits; ++s) {
            for (int c = 0; c < counts[s]; ++c) assign(pooled[cursor++], static_cast<SplitName>(s));
        }
    }

    for (int s = 0; s < kNumSplits; ++s) {
        auto& ids = result.split.of(static_cast<SplitName>(s));
        std::sort(ids.begin(), ids.end());
    }
    return result;
}

}  // namespace mf
