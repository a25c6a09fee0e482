#pragma once
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "rasa/adam.hpp"
#include "rasa/datamodel.hpp"
#include "rasa/rng.hpp"
#include "rasa/survstats.hpp"
#include "rasa/tff.hpp"

namespace rasa {

// ---- configuration ----

struct PMixDistribution {
    std::string kind = "uniform";  // "uniform" | "beta"
    double alpha = 1.0;            // Beta(alpha, alpha) when kind == "beta"

    void validate() const {
        if (kind != "uniform" && kind != "beta")
            throw ConfigError("p_mix distribution must be 'uniform' or 'beta', got '" + kind + "'");
        if (kind == "beta" && !(alpha > 0.0))
            throw ConfigError("p_mix beta distribution needs alpha > 0");
    }
};

enum class MixConvention {
    // Patch fraction taken from a parent equals that parent's label weight;
    // p_mix in {0,1} reproduces a parent exactly.
    LabelConsistent,
    // Fractions follow the sampling sentence verbatim: p_mix of the patches
    // from parent a, 1 - p_mix from parent b.
    PaperLiteral,
};

inline MixConvention mix_convention_from_string(const std::string& s) {
    if (s == "label_consistent") return MixConvention::LabelConsistent;
    if (s == "paper_literal") return MixConvention::PaperLiteral;
    throw ConfigError("mix convention must be 'label_consistent' or 'paper_literal', got '" + s +
                      "'");
}

inline std::string to_string(MixConvention c) {
    return c == MixConvention::LabelConsistent ? "label_consistent" : "paper_literal";
}

struct TrainConfig {
    double gamma = 0.5;
    double p_aug = 0.7;
    double lambda_kl = 1e-2;
    double learning_rate = 1e-5;
    int epochs = 60;
    int batch_size = 8;
    PMixDistribution p_mix;
    MixConvention mix_convention = MixConvention::LabelConsistent;
    std::uint64_t seed = 0;
    TffConfig tff;

    void validate() const {
        if (!(gamma >= -1.0 && gamma <= 1.0))
            throw ConfigError("TrainConfig: gamma must lie in [-1, 1]");
        if (!(p_aug >= 0.0 && p_aug <= 1.0))
            throw ConfigError("TrainConfig: p_aug must lie in [0, 1]");
        if (!(lambda_kl >= 0.0)) throw ConfigError("TrainConfig: lambda must be >= 0");
        if (!(learning_rate > 0.0)) throw ConfigError("TrainConfig: learning rate must be positive");
        if (epochs < 1) throw ConfigError("TrainConfig: epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("TrainConfig: batch size must be >= 1");
        p_mix.validate();
        tff.validate();
    }
};

// ---- bag cache ----

// Loads feature bags for a manifest once and hands out references.
class BagCache {
public:
    explicit BagCache(const CohortManifest& manifest) : manifest_(&manifest) {}

    const FeatureBag& patches(const std::string& id) {
        auto it = patch_bags_.find(id);
        if (it != patch_bags_.end()) return it->second;
        const CaseRecord& rec = manifest_->case_by_id(id);
        return patch_bags_.emplace(id, read_feature_bag(manifest_->patch_path(rec))).first->second;
    }

    const FeatureBag& text(const std::string& id) {
        auto it = text_bags_.find(id);
        if (it != text_bags_.end()) return it->second;
        const CaseRecord& rec = manifest_->case_by_id(id);
        return text_bags_.emplace(id, read_feature_bag(manifest_->text_path(rec))).first->second;
    }

    const CohortManifest& manifest() const { return *manifest_; }

private:
    const CohortManifest* manifest_;
    std::map<std::string, FeatureBag> patch_bags_;
    std::map<std::string, FeatureBag> text_bags_;
};

// ---- key text feature and patch sampling ----

struct KeyTextFeature {
    std::vector<double> value;  // d_model
    bool fallback_all_rows = false;
};

// Mean of the keyword-selected T_proj rows; falls back to the mean of all
// rows when no keyword index is available.
inline KeyTextFeature key_text_feature(const Tensor& t_proj, const std::vector<int>& keyword_indices) {
    KeyTextFeature out;
    std::vector<int> rows = keyword_indices;
    if (rows.empty()) {
        out.fallback_all_rows = true;
        rows.resize(t_proj.rows());
        std::iota(rows.begin(), rows.end(), 0);
    }
    for (int r : rows)
        if (r < 0 || r >= t_proj.rows())
            throw ValidationError("key_text_feature: keyword index " + std::to_string(r) +
                                  " out of range for " + std::to_string(t_proj.rows()) + " tokens");
    out.value.assign(t_proj.cols(), 0.0);
    for (int r : rows)
        for (int c = 0; c < t_proj.cols(); ++c) out.value[c] += t_proj.at(r, c);
    for (auto& v : out.value) v /= static_cast<double>(rows.size());
    return out;
}

struct SampledPatches {
    std::vector<int> kept;             // indices into the case's patch bag, ascending
    std::vector<double> similarities;  // per patch; 0 for zero-norm rows
    int zero_norm_rows = 0;
    bool used_argmax_fallback = false;
};

// Keeps the patches whose cosine similarity against the key reaches gamma;
// zero-norm rows never qualify; if nothing passes, the single most similar
// patch is kept.
inline SampledPatches sample_patches(const FeatureBag& patch_rows, const std::vector<double>& key,
                                     double gamma) {
    if (patch_rows.n < 1) throw ValidationError("sample_patches: empty patch bag");
    if (static_cast<int>(key.size()) != patch_rows.d)
        throw ShapeError("sample_patches: key dim " + std::to_string(key.size()) +
                         " != patch dim " + std::to_string(patch_rows.d));
    double key_norm = 0.0;
    for (double v : key) key_norm += v * v;
    key_norm = std::sqrt(key_norm);

    SampledPatches out;
    out.similarities.resize(patch_rows.n, 0.0);
    std::vector<bool> zero_row(patch_rows.n, false);
    for (int i = 0; i < patch_rows.n; ++i) {
        double dot = 0.0, norm = 0.0;
        for (int j = 0; j < patch_rows.d; ++j) {
            const double x = patch_rows.at(i, j);
            dot += x * key[j];
            norm += x * x;
        }
        norm = std::sqrt(norm);
        if (norm == 0.0 || key_norm == 0.0) {
            zero_row[i] = true;
            ++out.zero_norm_rows;
            continue;
        }
        out.similarities[i] = dot / (norm * key_norm);
    }
    for (int i = 0; i < patch_rows.n; ++i)
        if (!zero_row[i] && out.similarities[i] >= gamma) out.kept.push_back(i);
    if (out.kept.empty()) {
        int best = 0;
        for (int i = 1; i < patch_rows.n; ++i)
            if (out.similarities[i] > out.similarities[best]) best = i;
        out.kept.push_back(best);
        out.used_argmax_fallback = true;
    }
    return out;
}

inline FeatureBag subset_bag(const FeatureBag& bag, const std::vector<int>& rows) {
    FeatureBag out;
    out.n = static_cast<int>(rows.size());
    out.d = bag.d;
    out.values.reserve(rows.size() * static_cast<std::size_t>(bag.d));
    for (int r : rows)
        for (int j = 0; j < bag.d; ++j) out.values.push_back(bag.at(r, j));
    if (bag.coords) {
        std::vector<GridCoord> coords;
        coords.reserve(rows.size());
        for (int r : rows) coords.push_back((*bag.coords)[r]);
        out.coords = std::move(coords);
    }
    return out;
}

// ---- risk labeling ----

struct RiskLabeling {
    std::vector<std::string> case_ids;
    std::vector<double> sigmoid_scores;
    double threshold = 0.5;  // median of the training-set scores
    std::map<std::string, int> bits;

    int bit_of(const std::string& id) const {
        auto it = bits.find(id);
        if (it == bits.end()) throw ValidationError("risk labeling: unknown case id " + id);
        return it->second;
    }
};

// Median of the scores (mean of the middle two for even counts) and the
// median-inclusive risk bits.
inline std::pair<double, std::vector<int>> risk_bits_from_scores(const std::vector<double>& scores) {
    if (scores.size() < 2)
        throw ValidationError("risk labeling: need at least 2 scores");
    std::vector<double> sorted = scores;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    const double median = n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    std::vector<int> bits;
    bits.reserve(n);
    for (double s : scores) bits.push_back(s >= median ? 1 : 0);
    return {median, bits};
}

// Teacher sigmoid scores over the training cases, thresholded at their
// median.
inline RiskLabeling label_risk(const TffParams& teacher, BagCache& bags,
                               const std::vector<std::string>& train_ids) {
    RiskLabeling out;
    out.case_ids = train_ids;
    for (const auto& id : train_ids) {
        const double y = tff_forward(teacher, bags.text(id), bags.patches(id)).risk.value();
        out.sigmoid_scores.push_back(sigmoid_value(y));
    }
    auto [median, bits] = risk_bits_from_scores(out.sigmoid_scores);
    out.threshold = median;
    for (std::size_t i = 0; i < train_ids.size(); ++i) out.bits[train_ids[i]] = bits[i];
    return out;
}

// ---- risk-aware mixup ----

// One case as the student consumes it: full text plus teacher-sampled key
// patches.
struct SampledCase {
    std::string id;
    FeatureBag text;          // full text bag
    std::vector<int> keyword_token_indices;
    FeatureBag key_patches;   // sampled rows of the raw patch bag
    SurvivalLabel label;
};

struct MixedSample {
    FeatureBag text;
    std::vector<int> keyword_token_indices;
    FeatureBag patches;
    SurvivalLabel label;
    std::string parent_a, parent_b;
    double p_mix = 0.0;
    bool augmented = true;
};

namespace detail {

inline std::vector<int> draw_subset(Rng& rng, int n, int count) {
    std::vector<int> all(n);
    std::iota(all.begin(), all.end(), 0);
    rng.shuffle(all);
    std::vector<int> subset(all.begin(), all.begin() + count);
    std::sort(subset.begin(), subset.end());
    return subset;
}

}  // namespace detail

// Soft-mixing of two sampled cases. Text goes to the higher-risk parent for
// heterogeneous risk pairs, parent a otherwise. Labels interpolate with
// weight 1 - p_mix on parent a under both conventions.
inline MixedSample mixup(const SampledCase& a, const SampledCase& b, int risk_a, int risk_b,
                         double p_mix, MixConvention convention, Rng& rng) {
    if (a.key_patches.n < 1 || b.key_patches.n < 1)
        throw ValidationError("mixup: both parents need non-empty sampled patch bags");
    if (!(p_mix >= 0.0 && p_mix <= 1.0)) throw NumericError("mixup: p_mix must lie in [0,1]");

    MixedSample out;
    out.parent_a = a.id;
    out.parent_b = b.id;
    out.p_mix = p_mix;

    // homogeneous risks keep parent a's text; heterogeneous pairs take the
    // higher-risk parent's
    if (risk_a >= risk_b) {
        out.text = a.text;
        out.keyword_token_indices = a.keyword_token_indices;
    } else {
        out.text = b.text;
        out.keyword_token_indices = b.keyword_token_indices;
    }

    const double weight_a = convention == MixConvention::LabelConsistent ? 1.0 - p_mix : p_mix;
    const int from_a = static_cast<int>(std::ceil(weight_a * a.key_patches.n));
    const int from_b = static_cast<int>(std::ceil((1.0 - weight_a) * b.key_patches.n));

    FeatureBag mixed;
    mixed.d = a.key_patches.d;
    if (b.key_patches.d != mixed.d)
        throw ShapeError("mixup: parents have different patch dims");
    if (from_a > 0) {
        auto rows = detail::draw_subset(rng, a.key_patches.n, std::min(from_a, a.key_patches.n));
        FeatureBag part = subset_bag(a.key_patches, rows);
        mixed.values.insert(mixed.values.end(), part.values.begin(), part.values.end());
        mixed.n += part.n;
    }
    if (from_b > 0) {
        auto rows = detail::draw_subset(rng, b.key_patches.n, std::min(from_b, b.key_patches.n));
        FeatureBag part = subset_bag(b.key_patches, rows);
        mixed.values.insert(mixed.values.end(), part.values.begin(), part.values.end());
        mixed.n += part.n;
    }
    out.patches = std::move(mixed);

    out.label.event = (1.0 - p_mix) * a.label.event + p_mix * b.label.event;
    out.label.time = (1.0 - p_mix) * a.label.time + p_mix * b.label.time;
    return out;
}

// Draw from the configured p_mix distribution.
inline double draw_p_mix(Rng& rng, const PMixDistribution& dist) {
    if (dist.kind == "uniform") return rng.uniform();
    // Beta(alpha, alpha) via two Marsaglia-Tsang gamma draws
    auto gamma_draw = [&rng](double shape) {
        double boost = 1.0;
        double a = shape;
        if (a < 1.0) {
            boost = std::pow(rng.uniform() + 1e-15, 1.0 / a);
            a += 1.0;
        }
        const double d = a - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = rng.normal();
            double v = 1.0 + c * x;
            if (v <= 0.0) continue;
            v = v * v * v;
            const double u = rng.uniform();
            if (u < 1.0 - 0.0331 * x * x * x * x) return boost * d * v;
            if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return boost * d * v;
        }
    };
    const double g1 = gamma_draw(dist.alpha);
    const double g2 = gamma_draw(dist.alpha);
    if (g1 + g2 == 0.0) return 0.5;
    return g1 / (g1 + g2);
}

// ---- training ----

struct TrainLogEntry {
    int epoch = 0;          // 0 is the pre-training evaluation
    double train_loss = 0.0;
    double val_ci = std::numeric_limits<double>::quiet_NaN();
    int skipped_batches = 0;
};

struct TrainResult {
    TffParams params;       // best-validation checkpoint
    int best_epoch = 0;
    double best_val_ci = std::numeric_limits<double>::quiet_NaN();
    std::vector<TrainLogEntry> log;
};

namespace detail {

inline std::vector<SurvivalLabel> labels_for(const CohortManifest& m,
                                             const std::vector<std::string>& ids) {
    std::vector<SurvivalLabel> out;
    for (const auto& id : ids) out.push_back(m.case_by_id(id).label);
    return out;
}

// Validation concordance from full bags.
inline double validation_ci_full(const TffParams& params, BagCache& bags,
                                 const std::vector<std::string>& ids) {
    std::vector<double> scores;
    for (const auto& id : ids)
        scores.push_back(tff_forward(params, bags.text(id), bags.patches(id)).risk.value());
    try {
        return concordance_index(scores, labels_for(bags.manifest(), ids));
    } catch (const UndefinedStatError&) {
        return std::numeric_limits<double>::quiet_NaN();
    }
}

inline double validation_ci_sampled(const TffParams& params,
                                    const std::map<std::string, SampledCase>& sampled,
                                    const std::vector<std::string>& ids,
                                    const CohortManifest& manifest) {
    std::vector<double> scores;
    for (const auto& id : ids) {
        const SampledCase& c = sampled.at(id);
        scores.push_back(tff_forward(params, c.text, c.key_patches).risk.value());
    }
    try {
        return concordance_index(scores, labels_for(manifest, ids));
    } catch (const UndefinedStatError&) {
        return std::numeric_limits<double>::quiet_NaN();
    }
}

}  // namespace detail

// Stage I: train the Text-Fused Former on full bags with the Cox objective,
// keeping the epoch checkpoint with the best validation concordance.
inline TrainResult train_teacher(BagCache& bags, int trial, const TrainConfig& config) {
    config.validate();
    const CohortManifest& manifest = bags.manifest();
    if (trial < 0 || trial >= static_cast<int>(manifest.splits.size()))
        throw ConfigError("train_teacher: trial " + std::to_string(trial) + " out of range");
    const TrialSplit& split = manifest.splits[trial];

    TffConfig tffc = config.tff;
    {
        Rng seed_rng = Rng(config.seed).fork("teacher_init").fork(static_cast<std::uint64_t>(trial));
        tffc.seed = seed_rng.next_u64();
    }
    TffParams params = init_params(tffc);
    std::vector<Tensor> trainable = params.all();
    AdamState adam = AdamState::for_params(trainable);

    TrainResult result;
    result.params = params.deep_copy();

    auto batch_loss_value = [&](const std::vector<std::string>& ids, bool update) {
        double epoch_loss = 0.0;
        int batches = 0, skipped = 0;
        for (std::size_t start = 0; start < ids.size(); start += config.batch_size) {
            const std::size_t stop = std::min(ids.size(), start + config.batch_size);
            std::vector<SurvivalLabel> labels;
            for (std::size_t i = start; i < stop; ++i)
                labels.push_back(manifest.case_by_id(ids[i]).label);
            ++batches;
            if (event_mass(labels) == 0.0) {
                ++skipped;
                continue;
            }
            Tape tape;
            double loss_value = 0.0;
            {
                TapeScope scope(tape);
                std::vector<Tensor> ys;
                for (std::size_t i = start; i < stop; ++i)
                    ys.push_back(tff_forward(params, bags.text(ids[i]), bags.patches(ids[i])).risk);
                Tensor scores = concat_rows(ys);
                Tensor loss = cox_loss(scores, labels);
                loss_value = loss.value();
                if (update) {
                    zero_grads(trainable);
                    backward(tape, loss);
                }
            }
            if (update) adam_step(trainable, adam, config.learning_rate);
            epoch_loss += loss_value;
        }
        return std::tuple<double, int, int>(batches > 0 ? epoch_loss / batches : 0.0, batches,
                                            skipped);
    };

    // pre-training loss over the unshuffled training split
    {
        auto [loss0, nb, skipped] = batch_loss_value(split.train, false);
        TrainLogEntry e;
        e.epoch = 0;
        e.train_loss = loss0;
        e.skipped_batches = skipped;
        result.log.push_back(e);
    }

    Rng shuffle_root = Rng(config.seed).fork("teacher_shuffle").fork(static_cast<std::uint64_t>(trial));
    double best_ci = -1.0;
    int best_epoch = -1;
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        std::vector<std::string> order = split.train;
        Rng epoch_rng = shuffle_root.fork(static_cast<std::uint64_t>(epoch));
        epoch_rng.shuffle(order);
        auto [loss, nb, skipped] = batch_loss_value(order, true);
        TrainLogEntry e;
        e.epoch = epoch;
        e.train_loss = loss;
        e.skipped_batches = skipped;
        e.val_ci = detail::validation_ci_full(params, bags, split.val);
        result.log.push_back(e);
        if (!std::isnan(e.val_ci) && e.val_ci > best_ci) {
            best_ci = e.val_ci;
            best_epoch = epoch;
            result.params = params.deep_copy();
        }
    }
    if (best_epoch < 0) {
        // no epoch produced a defined validation CI; fall back to the final state
        result.params = params.deep_copy();
        result.best_epoch = config.epochs;
    } else {
        result.best_epoch = best_epoch;
        result.best_val_ci = best_ci;
    }
    return result;
}

// Frozen-teacher sampling for one case: key from the teacher's T_proj rows at
// the keyword indices, similarities against the teacher-projected patches.
struct CaseSampling {
    SampledCase sampled;
    std::vector<double> similarities;
    bool key_fallback = false;
    bool argmax_fallback = false;
};

inline CaseSampling sample_case(const TffParams& teacher, BagCache& bags, const std::string& id,
                                double gamma) {
    const CaseRecord& rec = bags.manifest().case_by_id(id);
    const FeatureBag& text = bags.text(id);
    const FeatureBag& patches = bags.patches(id);
    ForwardOutput fwd = tff_forward(teacher, text, patches);
    KeyTextFeature key = key_text_feature(fwd.t_proj, rec.keyword_token_indices);

    Tensor projected = project_patches(teacher, patches);
    FeatureBag projected_bag;
    projected_bag.n = projected.rows();
    projected_bag.d = projected.cols();
    projected_bag.values.assign(projected.data().begin(), projected.data().end());
    SampledPatches sp = sample_patches(projected_bag, key.value, gamma);

    CaseSampling out;
    out.sampled.id = id;
    out.sampled.text = text;
    out.sampled.keyword_token_indices = rec.keyword_token_indices;
    out.sampled.key_patches = subset_bag(patches, sp.kept);
    out.sampled.label = rec.label;
    out.similarities = std::move(sp.similarities);
    out.key_fallback = key.fallback_all_rows;
    out.argmax_fallback = sp.used_argmax_fallback;
    return out;
}

// Stage II: student training over teacher-sampled bags with risk-aware mixup
// and KL guidance on non-augmented slots.
inline TrainResult train_student(BagCache& bags, int trial, const TffParams& teacher,
                                 const TrainConfig& config) {
    config.validate();
    const CohortManifest& manifest = bags.manifest();
    if (trial < 0 || trial >= static_cast<int>(manifest.splits.size()))
        throw ConfigError("train_student: trial " + std::to_string(trial) + " out of range");
    const TrialSplit& split = manifest.splits[trial];

    RiskLabeling risks = label_risk(teacher, bags, split.train);

    std::map<std::string, SampledCase> sampled;
    std::map<std::string, double> teacher_scores;  // on the sampled inputs
    for (const auto& id : split.train) {
        CaseSampling cs = sample_case(teacher, bags, id, config.gamma);
        teacher_scores[id] =
            tff_forward(teacher, cs.sampled.text, cs.sampled.key_patches).risk.value();
        sampled.emplace(id, std::move(cs.sampled));
    }
    for (const auto& id : split.val)
        sampled.emplace(id, sample_case(teacher, bags, id, config.gamma).sampled);

    TffParams params = teacher.deep_copy();
    std::vector<Tensor> trainable = params.all();
    AdamState adam = AdamState::for_params(trainable);

    TrainResult result;
    result.params = params.deep_copy();

    Rng root = Rng(config.seed).fork("student").fork(static_cast<std::uint64_t>(trial));
    const int n_train = static_cast<int>(split.train.size());

    double best_ci = -1.0;
    int best_epoch = -1;
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        std::vector<std::string> order = split.train;
        Rng shuffle_rng = root.fork("shuffle").fork(static_cast<std::uint64_t>(epoch));
        shuffle_rng.shuffle(order);
        Rng aug_rng = root.fork("aug").fork(static_cast<std::uint64_t>(epoch));
        Rng partner_rng = root.fork("partner").fork(static_cast<std::uint64_t>(epoch));
        Rng pmix_rng = root.fork("pmix").fork(static_cast<std::uint64_t>(epoch));
        Rng subset_rng = root.fork("subset").fork(static_cast<std::uint64_t>(epoch));

        double epoch_loss = 0.0;
        int batches = 0, skipped = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t stop = std::min(order.size(), start + config.batch_size);

            struct Slot {
                const SampledCase* non_aug = nullptr;  // set for plain slots
                MixedSample mixed;                     // set for augmented slots
                SurvivalLabel label;
                double teacher_y = 0.0;
            };
            std::vector<Slot> slots;
            for (std::size_t i = start; i < stop; ++i) {
                const std::string& id = order[i];
                Slot slot;
                const bool augment = config.p_aug > 0.0 && aug_rng.uniform() < config.p_aug;
                if (augment && n_train > 1) {
                    int partner_ix = partner_rng.uniform_int(n_train - 1);
                    // uniform over the training split excluding the case itself
                    std::size_t self_ix = 0;
                    for (std::size_t k = 0; k < split.train.size(); ++k)
                        if (split.train[k] == id) self_ix = k;
                    if (partner_ix >= static_cast<int>(self_ix)) ++partner_ix;
                    const std::string& partner = split.train[partner_ix];
                    const double p_mix = draw_p_mix(pmix_rng, config.p_mix);
                    slot.mixed = mixup(sampled.at(id), sampled.at(partner), risks.bit_of(id),
                                       risks.bit_of(partner), p_mix, config.mix_convention,
                                       subset_rng);
                    slot.label = slot.mixed.label;
                } else {
                    slot.non_aug = &sampled.at(id);
                    slot.label = slot.non_aug->label;
                    slot.teacher_y = teacher_scores.at(id);
                }
                slots.push_back(std::move(slot));
            }

            std::vector<SurvivalLabel> labels;
            for (const auto& s : slots) labels.push_back(s.label);
            ++batches;
            if (event_mass(labels) == 0.0) {
                ++skipped;
                continue;
            }

            Tape tape;
            double loss_value = 0.0;
            {
                TapeScope scope(tape);
                std::vector<Tensor> ys;
                std::vector<int> non_aug_slots;
                for (std::size_t s = 0; s < slots.size(); ++s) {
                    const auto& slot = slots[s];
                    if (slot.non_aug) {
                        ys.push_back(
                            tff_forward(params, slot.non_aug->text, slot.non_aug->key_patches).risk);
                        non_aug_slots.push_back(static_cast<int>(s));
                    } else {
                        ys.push_back(tff_forward(params, slot.mixed.text, slot.mixed.patches).risk);
                    }
                }
                Tensor loss = cox_loss(concat_rows(ys), labels);
                if (config.lambda_kl > 0.0 && !non_aug_slots.empty()) {
                    Tensor kl_sum = Tensor::scalar(0.0);
                    for (int s : non_aug_slots)
                        kl_sum = add(kl_sum, kl_loss(ys[s], slots[s].teacher_y));
                    loss = add(loss, scale(kl_sum, config.lambda_kl /
                                                       static_cast<double>(non_aug_slots.size())));
                }
                loss_value = loss.value();
                zero_grads(trainable);
                backward(tape, loss);
            }
            adam_step(trainable, adam, config.learning_rate);
            epoch_loss += loss_value;
        }

        TrainLogEntry e;
        e.epoch = epoch;
        e.train_loss = batches > 0 ? epoch_loss / batches : 0.0;
        e.skipped_batches = skipped;
        e.val_ci = detail::validation_ci_sampled(params, sampled, split.val, manifest);
        result.log.push_back(e);
        if (!std::isnan(e.val_ci) && e.val_ci > best_ci) {
            best_ci = e.val_ci;
            best_epoch = epoch;
            result.params = params.deep_copy();
        }
    }
    if (best_epoch < 0) {
        result.params = params.deep_copy();
        result.best_epoch = config.epochs;
    } else {
        result.best_epoch = best_epoch;
        result.best_val_ci = best_ci;
    }
    return result;
}

// Vanilla training loop over the teacher-sampled inputs: teacher warm start,
// Cox loss only, no augmentation and no KL. The ablation-degeneracy reference
// for the student trainer.
inline TrainResult train_plain_sampled(BagCache& bags, int trial, const TffParams& teacher,
                                       const TrainConfig& config) {
    config.validate();
    const CohortManifest& manifest = bags.manifest();
    const TrialSplit& split = manifest.splits[trial];

    std::map<std::string, SampledCase> sampled;
    for (const auto& id : split.train)
        sampled.emplace(id, sample_case(teacher, bags, id, config.gamma).sampled);
    for (const auto& id : split.val)
        sampled.emplace(id, sample_case(teacher, bags, id, config.gamma).sampled);

    TffParams params = teacher.deep_copy();
    std::vector<Tensor> trainable = params.all();
    AdamState adam = AdamState::for_params(trainable);

    TrainResult result;
    result.params = params.deep_copy();
    Rng root = Rng(config.seed).fork("student").fork(static_cast<std::uint64_t>(trial));

    double best_ci = -1.0;
    int best_epoch = -1;
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        std::vector<std::string> order = split.train;
        Rng shuffle_rng = root.fork("shuffle").fork(static_cast<std::uint64_t>(epoch));
        shuffle_rng.shuffle(order);

        double epoch_loss = 0.0;
        int batches = 0, skipped = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t stop = std::min(order.size(), start + config.batch_size);
            std::vector<SurvivalLabel> labels;
            for (std::size_t i = start; i < stop; ++i) labels.push_back(sampled.at(order[i]).label);
            ++batches;
            if (event_mass(labels) == 0.0) {
                ++skipped;
                continue;
            }
            Tape tape;
            double loss_value = 0.0;
            {
                TapeScope scope(tape);
                std::vector<Tensor> ys;
                for (std::size_t i = start; i < stop; ++i) {
                    const SampledCase& c = sampled.at(order[i]);
                    ys.push_back(tff_forward(params, c.text, c.key_patches).risk);
                }
                Tensor loss = cox_loss(concat_rows(ys), labels);
                loss_value = loss.value();
                zero_grads(trainable);
                backward(tape, loss);
            }
            adam_step(trainable, adam, config.learning_rate);
            epoch_loss += loss_value;
        }

        TrainLogEntry e;
        e.epoch = epoch;
        e.train_loss = batches > 0 ? epoch_loss / batches : 0.0;
        e.skipped_batches = skipped;
        e.val_ci = detail::validation_ci_sampled(params, sampled, split.val, manifest);
        result.log.push_back(e);
        if (!std::isnan(e.val_ci) && e.val_ci > best_ci) {
            best_ci = e.val_ci;
            best_epoch = epoch;
            result.params = params.deep_copy();
        }
    }
    if (best_epoch < 0) {
        result.params = params.deep_copy();
        result.best_epoch = config.epochs;
    } else {
        result.best_epoch = best_epoch;
        result.best_val_ci = best_ci;
    }
    return result;
}

// ---- similarity map export ----

struct SimilarityRecord {
    int patch_index = 0;
    std::int32_t x = 0, y = 0;
    double similarity = 0.0;
    std::vector<bool> kept;  // one flag per gamma in the request
};

struct SimilarityMap {
    std::string case_id;
    std::vector<double> gammas;
    std::vector<SimilarityRecord> records;
};

// Per-patch cosine similarities and keep decisions at every requested
// threshold, for Fig.-style map export. Requires patch coordinates.
inline SimilarityMap export_similarity_map(const TffParams& teacher, BagCache& bags,
                                           const std::string& case_id,
                                           const std::vector<double>& gammas) {
    const FeatureBag& patches = bags.patches(case_id);
    if (!patches.coords)
        throw ValidationError("export_similarity_map: case " + case_id +
                              " has no patch coordinates");
    SimilarityMap map;
    map.case_id = case_id;
    map.gammas = gammas;

    const CaseRecord& rec = bags.manifest().case_by_id(case_id);
    ForwardOutput fwd = tff_forward(teacher, bags.text(case_id), patches);
    KeyTextFeature key = key_text_feature(fwd.t_proj, rec.keyword_token_indices);
    Tensor projected = project_patches(teacher, patches);
    FeatureBag projected_bag;
    projected_bag.n = projected.rows();
    projected_bag.d = projected.cols();
    projected_bag.values.assign(projected.data().begin(), projected.data().end());

    const SampledPatches base = sample_patches(projected_bag, key.value, -1.0);
    std::vector<SampledPatches> per_gamma;
    for (double g : gammas) per_gamma.push_back(sample_patches(projected_bag, key.value, g));

    for (int i = 0; i < patches.n; ++i) {
        SimilarityRecord r;
        r.patch_index = i;
        r.x = (*patches.coords)[i].x;
        r.y = (*patches.coords)[i].y;
        r.similarity = base.similarities[i];
        for (const auto& sp : per_gamma)
            r.kept.push_back(std::find(sp.kept.begin(), sp.kept.end(), i) != sp.kept.end());
        map.records.push_back(std::move(r));
    }
    return map;
}

}  // namespace rasa
