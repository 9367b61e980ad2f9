#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <vector>

#include "holoseg/core.hpp"
#include "holoseg/image_io.hpp"
#include "holoseg/scene.hpp"

namespace holoseg {

/// One panoptic segment: a stuff class's pixels (one segment per class per
/// image) or one thing/unknown instance.
struct Segment {
    int class_id = 0;
    int instance_id = 0;  // 0 for stuff segments
    bool is_unknown = false;
    std::vector<int> pixels;  // sorted linear indices
};

/// Class-id layout shared by predictions and canonicalized ground truth:
/// stuff in [0, K_st), known things in [K_st, K), the single unknown class K.
struct ClassLayout {
    int K_st = 0;
    int K = 0;

    bool is_stuff(int id) const { return id >= 0 && id < K_st; }
    bool is_known_thing(int id) const { return id >= K_st && id < K; }
    int unknown_id() const { return K; }
};

/// Maps raw ground-truth ids (catalog unknown ids >= K) onto the single
/// reported unknown class.
inline Grid<uint8_t> canonicalize_semantic(const Grid<uint8_t>& sem, const ClassLayout& layout) {
    Grid<uint8_t> out = sem;
    for (auto& v : out.data)
        if (v != kIgnoreLabel && v >= layout.K) v = static_cast<uint8_t>(layout.unknown_id());
    return out;
}

/// Splits maps into segments: per-class unions for stuff, per-instance sets
/// for things and unknowns. Ignore pixels are excluded entirely.
inline std::vector<Segment> extract_segments(const Grid<uint8_t>& semantic,
                                             const Grid<uint16_t>& instance,
                                             const ClassLayout& layout) {
    if (!semantic.same_shape(Grid<uint8_t>(instance.rows, instance.cols)))
        throw ConfigError("extract_segments: shape mismatch");
    std::map<int, Segment> stuff;                    // class -> segment
    std::map<int, Segment> things;                   // instance id -> segment
    for (int i = 0; i < static_cast<int>(semantic.size()); ++i) {
        int sem = semantic.data[i];
        if (sem == kIgnoreLabel) continue;
        int inst = instance.data[i];
        if (layout.is_stuff(sem)) {
            if (inst != 0) throw DataError("extract_segments: stuff pixel with an instance id");
            Segment& seg = stuff[sem];
            seg.class_id = sem;
            seg.pixels.push_back(i);
        } else {
            if (inst == 0)
                throw DataError("extract_segments: thing-class pixel without an instance id");
            Segment& seg = things[inst];
            if (seg.pixels.empty()) {
                seg.class_id = sem;
                seg.instance_id = inst;
                seg.is_unknown = sem == layout.unknown_id();
            } else if (seg.class_id != sem) {
                throw DataError("extract_segments: instance id spans two semantic classes");
            }
            seg.pixels.push_back(i);
        }
    }
    std::vector<Segment> out;
    for (auto& [k, seg] : stuff) out.push_back(std::move(seg));
    for (auto& [k, seg] : things) out.push_back(std::move(seg));
    return out;
}

struct PqTally {
    long tp = 0, fp = 0, fn = 0;
    double iou_sum = 0;

    void operator+=(const PqTally& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        iou_sum += o.iou_sum;
    }
    bool populated() const { return tp != 0 || fp != 0 || fn != 0; }
    double rq() const { return tp + fp + fn == 0 ? 0 : tp / (tp + 0.5 * fp + 0.5 * fn); }
    double sq() const { return tp == 0 ? 0 : iou_sum / tp; }
    double pq() const { return tp + fp + fn == 0 ? 0 : iou_sum / (tp + 0.5 * fp + 0.5 * fn); }
};

struct PqReport {
    PqTally known_things, known_stuff, all_known, unknown;

    ordered_json to_json() const {
        auto dump = [](const PqTally& t) -> ordered_json {
            if (!t.populated()) return nullptr;
            return ordered_json{{"pq", t.pq()}, {"rq", t.rq()}, {"sq", t.sq()},
                                {"tp", t.tp},   {"fp", t.fp},   {"fn", t.fn}};
        };
        return ordered_json{{"known_things", dump(known_things)},
                            {"known_stuff", dump(known_stuff)},
                            {"all_known", dump(all_known)},
                            {"unknown", dump(unknown)}};
    }
};

/// Accumulates the unique IoU>0.5 matching of one image into per-class
/// tallies. gt_raw_sem supplies the ignore mask (255) and, for known-class
/// scoring, ground-truth unknown pixels also count as ignore. Unmatched
/// predictions mostly covered by their ignore set are dropped, not counted FP.
inline void pq_accumulate(const Grid<uint8_t>& pred_sem, const Grid<uint16_t>& pred_inst,
                          const Grid<uint8_t>& gt_sem_raw, const Grid<uint16_t>& gt_inst,
                          const ClassLayout& layout, std::map<int, PqTally>& per_class) {
    Grid<uint8_t> gt_sem = canonicalize_semantic(gt_sem_raw, layout);
    std::vector<Segment> pred = extract_segments(pred_sem, pred_inst, layout);
    std::vector<Segment> gt = extract_segments(gt_sem, gt_inst, layout);
    const int n_px = static_cast<int>(gt_sem.size());

    // effective ignore masks: known-class scoring also ignores GT unknowns
    std::vector<bool> ignore_known(n_px), ignore_unknown(n_px);
    for (int i = 0; i < n_px; ++i) {
        bool raw = gt_sem_raw.data[i] == kIgnoreLabel;
        ignore_unknown[i] = raw;
        ignore_known[i] = raw || gt_sem.data[i] == layout.unknown_id();
    }
    auto ignore_for = [&](int class_id) -> const std::vector<bool>& {
        return class_id == layout.unknown_id() ? ignore_unknown : ignore_known;
    };

    // pixel -> pred segment index
    std::vector<int> pred_at(n_px, -1);
    for (size_t p = 0; p < pred.size(); ++p)
        for (int px : pred[p].pixels) pred_at[px] = static_cast<int>(p);

    std::vector<long> pred_eff_size(pred.size(), 0);
    for (size_t p = 0; p < pred.size(); ++p) {
        const auto& ign = ignore_for(pred[p].class_id);
        for (int px : pred[p].pixels)
            if (!ign[px]) ++pred_eff_size[p];
    }

    std::vector<int> pred_matched(pred.size(), 0);
    for (const Segment& g : gt) {
        const auto& ign = ignore_for(g.class_id);
        long gt_size = 0;
        std::map<int, long> overlap;
        for (int px : g.pixels) {
            if (ign[px]) continue;
            ++gt_size;
            int p = pred_at[px];
            if (p >= 0 && pred[p].class_id == g.class_id) ++overlap[p];
        }
        int matched = -1;
        double matched_iou = 0;
        for (auto [p, inter] : overlap) {
            double uni = static_cast<double>(gt_size) + pred_eff_size[p] - inter;
            double iou = uni > 0 ? inter / uni : 0.0;
            if (iou > 0.5) {
                // IoU > 0.5 admits at most one partner on either side
                if (matched >= 0) throw DataError("pq: matching uniqueness violated (gt side)");
                if (pred_matched[p]) throw DataError("pq: matching uniqueness violated (pred side)");
                matched = p;
                matched_iou = iou;
            }
        }
        PqTally& tally = per_class[g.class_id];
        if (matched >= 0) {
            pred_matched[matched] = 1;
            ++tally.tp;
            tally.iou_sum += matched_iou;
        } else {
            ++tally.fn;
        }
    }
    for (size_t p = 0; p < pred.size(); ++p) {
        if (pred_matched[p]) continue;
        const auto& ign = ignore_for(pred[p].class_id);
        long ignored = 0;
        for (int px : pred[p].pixels)
            if (ign[px]) ++ignored;
        // panoptic convention: predictions mostly covering ignore regions are
        // not penalized
        if (2 * ignored > static_cast<long>(pred[p].pixels.size())) continue;
        ++per_class[pred[p].class_id].fp;
    }
}

inline PqReport pq_report_from(const std::map<int, PqTally>& per_class, const ClassLayout& layout) {
    PqReport report;
    for (const auto& [class_id, tally] : per_class) {
        if (layout.is_stuff(class_id)) {
            report.known_stuff += tally;
            report.all_known += tally;
        } else if (layout.is_known_thing(class_id)) {
            report.known_things += tally;
            report.all_known += tally;
        } else {
            report.unknown += tally;
        }
    }
    return report;
}

/// Convenience wrapper over whole-map lists.
inline PqReport pq(const std::vector<Grid<uint8_t>>& pred_sem,
                   const std::vector<Grid<uint16_t>>& pred_inst,
                   const std::vector<Grid<uint8_t>>& gt_sem,
                   const std::vector<Grid<uint16_t>>& gt_inst, const ClassLayout& layout) {
    if (pred_sem.size() != gt_sem.size() || pred_inst.size() != gt_inst.size() ||
        pred_sem.size() != pred_inst.size())
        throw ConfigError("pq: image list size mismatch");
    std::map<int, PqTally> per_class;
    for (size_t i = 0; i < pred_sem.size(); ++i)
        pq_accumulate(pred_sem[i], pred_inst[i], gt_sem[i], gt_inst[i], layout, per_class);
    return pq_report_from(per_class, layout);
}

/// Mean IoU over the known classes present in ground truth; GT ignore and
/// unknown pixels are excluded.
inline double miou(const std::vector<Grid<uint8_t>>& pred_sem,
                   const std::vector<Grid<uint8_t>>& gt_sem, int K) {
    if (pred_sem.size() != gt_sem.size()) throw ConfigError("miou: image list size mismatch");
    std::vector<long> inter(K, 0), pred_count(K, 0), gt_count(K, 0);
    for (size_t i = 0; i < pred_sem.size(); ++i) {
        if (!pred_sem[i].same_shape(gt_sem[i])) throw ConfigError("miou: shape mismatch");
        for (size_t px = 0; px < gt_sem[i].size(); ++px) {
            int g = gt_sem[i].data[px];
            if (g == kIgnoreLabel || g >= K) continue;  // unknown GT is not scored
            int p = pred_sem[i].data[px];
            ++gt_count[g];
            if (p >= 0 && p < K) ++pred_count[p];
            if (p == g) ++inter[g];
        }
    }
    double sum = 0;
    int present = 0;
    for (int k = 0; k < K; ++k) {
        if (gt_count[k] == 0) continue;  // class absent from GT: excluded
        long uni = gt_count[k] + pred_count[k] - inter[k];
        sum += uni > 0 ? static_cast<double>(inter[k]) / uni : 0.0;
        ++present;
    }
    if (present == 0) throw DataError("miou: no known classes present in ground truth");
    return sum / present;
}

struct UncertaintyReport {
    double ap = 0;
    double fpr95 = 0;
    long n_pos = 0, n_neg = 0;

    ordered_json to_json() const {
        return ordered_json{{"ap", ap}, {"fpr95", fpr95}, {"n_pos", n_pos}, {"n_neg", n_neg}};
    }
};

namespace detail {

struct ScoredPixels {
    std::vector<std::pair<double, bool>> items;  // (score, is_positive)
    long n_pos = 0, n_neg = 0;
};

inline ScoredPixels collect_scored(const std::vector<Grid<double>>& scores,
                                   const std::vector<Grid<uint8_t>>& positive_mask,
                                   const std::vector<Grid<uint8_t>>* valid_mask) {
    ScoredPixels out;
    for (size_t i = 0; i < scores.size(); ++i) {
        for (size_t px = 0; px < scores[i].size(); ++px) {
            if (valid_mask && !(*valid_mask)[i].data[px]) continue;
            bool pos = positive_mask[i].data[px] != 0;
            out.items.emplace_back(scores[i].data[px], pos);
            (pos ? out.n_pos : out.n_neg)++;
        }
    }
    return out;
}

}  // namespace detail

/// Exact rank-based average precision of the binary "pixel is unknown" task,
/// higher score = more positive. Ties are handled as one block scored with
/// the block-end precision.
inline double unknown_ap(const std::vector<Grid<double>>& scores,
                         const std::vector<Grid<uint8_t>>& gt_unknown_mask,
                         const std::vector<Grid<uint8_t>>* valid_mask = nullptr) {
    detail::ScoredPixels sp = detail::collect_scored(scores, gt_unknown_mask, valid_mask);
    if (sp.n_pos == 0) throw DataError("unknown_ap: no positive pixels");
    if (sp.n_neg == 0) throw DataError("unknown_ap: no negative pixels");
    std::sort(sp.items.begin(), sp.items.end(),
              [](const auto& a, const auto& b) { return a.first > b.first; });
    double ap_sum = 0;
    long cum_pos = 0, cum_total = 0;
    size_t i = 0;
    while (i < sp.items.size()) {
        size_t j = i;
        long block_pos = 0;
        while (j < sp.items.size() && sp.items[j].first == sp.items[i].first) {
            if (sp.items[j].second) ++block_pos;
            ++j;
        }
        cum_pos += block_pos;
        cum_total += static_cast<long>(j - i);
        ap_sum += block_pos * (static_cast<double>(cum_pos) / cum_total);
        i = j;
    }
    return ap_sum / sp.n_pos;
}

/// False-positive rate at the first descending-score threshold whose TPR
/// reaches 0.95.
inline double fpr_at_95tpr(const std::vector<Grid<double>>& scores,
                           const std::vector<Grid<uint8_t>>& gt_unknown_mask,
                           const std::vector<Grid<uint8_t>>* valid_mask = nullptr) {
    detail::ScoredPixels sp = detail::collect_scored(scores, gt_unknown_mask, valid_mask);
    if (sp.n_pos == 0) throw DataError("fpr_at_95tpr: no positive pixels");
    if (sp.n_neg == 0) throw DataError("fpr_at_95tpr: no negative pixels");
    std::sort(sp.items.begin(), sp.items.end(),
              [](const auto& a, const auto& b) { return a.first > b.first; });
    long cum_pos = 0, cum_neg = 0;
    size_t i = 0;
    while (i < sp.items.size()) {
        size_t j = i;
        while (j < sp.items.size() && sp.items[j].first == sp.items[i].first) {
            if (sp.items[j].second)
                ++cum_pos;
            else
                ++cum_neg;
            ++j;
        }
        if (static_cast<double>(cum_pos) / sp.n_pos >= 0.95)
            return static_cast<double>(cum_neg) / sp.n_neg;
        i = j;
    }
    return 1.0;  // TPR never reaches 0.95 only if n_pos = 0, guarded above
}

inline UncertaintyReport uncertainty_report(const std::vector<Grid<double>>& scores,
                                            const std::vector<Grid<uint8_t>>& gt_unknown_mask,
                                            const std::vector<Grid<uint8_t>>* valid_mask = nullptr) {
    detail::ScoredPixels sp = detail::collect_scored(scores, gt_unknown_mask, valid_mask);
    UncertaintyReport r;
    r.n_pos = sp.n_pos;
    r.n_neg = sp.n_neg;
    r.ap = unknown_ap(scores, gt_unknown_mask, valid_mask);
    r.fpr95 = fpr_at_95tpr(scores, gt_unknown_mask, valid_mask);
    return r;
}

}  // namespace holoseg
