#pragma once
#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "rasa/datamodel.hpp"
#include "rasa/tensor.hpp"

namespace rasa {

// ---- risk sets ----

// Sorted view of a batch with Breslow risk sets: R(t_i) = { j : t_j >= t_i },
// ties included in each other's risk sets.
struct RiskSetView {
    std::vector<int> order;       // original indices, ascending observed time
    std::vector<int> risk_start;  // per sorted position, first sorted position of R(t_i)

    static RiskSetView build(const std::vector<SurvivalLabel>& labels) {
        RiskSetView v;
        const int n = static_cast<int>(labels.size());
        v.order.resize(n);
        std::iota(v.order.begin(), v.order.end(), 0);
        std::stable_sort(v.order.begin(), v.order.end(),
                         [&](int a, int b) { return labels[a].time < labels[b].time; });
        v.risk_start.resize(n);
        for (int i = 0; i < n; ++i) {
            int s = i;
            while (s > 0 && labels[v.order[s - 1]].time == labels[v.order[i]].time) --s;
            v.risk_start[i] = s;
        }
        return v;
    }

    // Original indices of R(t) for the subject at sorted position i.
    std::vector<int> risk_set(int sorted_pos) const {
        return std::vector<int>(order.begin() + risk_start[sorted_pos], order.end());
    }
};

// ---- Cox partial likelihood ----

// Negative log partial likelihood -sum_i delta_i (y_i - log sum_{j in R(t_i)} exp(y_j)).
// Fractional delta weights terms proportionally. Differentiable in the scores.
inline Tensor cox_loss(const Tensor& scores, const std::vector<SurvivalLabel>& labels) {
    const int n = scores.rows();
    if (n < 1 || labels.empty()) throw NumericError("cox_loss: empty input");
    if (scores.cols() != 1 || static_cast<std::size_t>(n) != labels.size())
        throw ShapeError("cox_loss: scores must be n x 1 aligned with labels");
    if (!scores.all_finite()) throw NumericError("cox_loss: non-finite score");
    for (const auto& l : labels)
        if (!(l.time > 0.0)) throw NumericError("cox_loss: times must be positive");

    RiskSetView view = RiskSetView::build(labels);
    Tensor sorted = gather_rows(scores, view.order);
    Tensor loss = Tensor::scalar(0.0);
    for (int i = 0; i < n; ++i) {
        const double delta = labels[view.order[i]].event;
        if (delta == 0.0) continue;
        Tensor yi = slice_rows(sorted, i, i + 1);
        Tensor lse = logsumexp_all(slice_rows(sorted, view.risk_start[i], n));
        loss = add(loss, scale(sub(yi, lse), -delta));
    }
    return loss;
}

// Total fractional event mass; a batch with zero mass has no Cox terms.
inline double event_mass(const std::vector<SurvivalLabel>& labels) {
    double s = 0.0;
    for (const auto& l : labels) s += l.event;
    return s;
}

// ---- Bernoulli KL distillation loss ----

constexpr double kKlProbClamp = 1e-7;

inline double sigmoid_value(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// D_KL(Bernoulli(sigmoid(y_student)) || Bernoulli(sigmoid(y_teacher))); the
// teacher score is a constant, gradient flows to the student only.
inline Tensor kl_loss(const Tensor& y_student, double y_teacher) {
    if (!y_student.is_scalar()) throw ShapeError("kl_loss: student score must be scalar");
    if (!std::isfinite(y_teacher)) throw NumericError("kl_loss: non-finite teacher score");
    double q = sigmoid_value(y_teacher);
    q = std::min(std::max(q, kKlProbClamp), 1.0 - kKlProbClamp);
    Tensor p = clamp(sigmoid(y_student), kKlProbClamp, 1.0 - kKlProbClamp);
    Tensor one_minus_p = sub(Tensor::scalar(1.0), p);
    Tensor t1 = mul(p, sub(log_elem(p), Tensor::scalar(std::log(q))));
    Tensor t2 = mul(one_minus_p, sub(log_elem(one_minus_p), Tensor::scalar(std::log(1.0 - q))));
    return add(t1, t2);
}

// ---- concordance index ----

// Harrell's C over comparable pairs (t_i < t_j with delta_i = 1, delta
// thresholded at 0.5); score ties earn half credit.
inline double concordance_index(const std::vector<double>& scores,
                                const std::vector<SurvivalLabel>& labels) {
    const std::size_t n = scores.size();
    if (n < 2 || labels.size() != n)
        throw NumericError("concordance_index: need >= 2 aligned samples");
    double comparable = 0.0, concordant = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!labels[i].event_observed()) continue;
        for (std::size_t j = 0; j < n; ++j) {
            if (labels[i].time < labels[j].time) {
                comparable += 1.0;
                if (scores[i] > scores[j])
                    concordant += 1.0;
                else if (scores[i] == scores[j])
                    concordant += 0.5;
            }
        }
    }
    if (comparable == 0.0)
        throw UndefinedStatError("concordance_index: no comparable pairs");
    return concordant / comparable;
}

// ---- Kaplan-Meier ----

// Product-limit curve over distinct event times.
struct KmCurve {
    std::vector<double> times;     // distinct event times, ascending
    std::vector<double> survival;  // S(t) just after each time
    std::vector<int> n_risk;       // at risk at each time
    std::vector<int> n_events;     // events at each time
};

inline KmCurve kaplan_meier(const std::vector<SurvivalLabel>& labels) {
    if (labels.empty()) throw NumericError("kaplan_meier: empty input");
    std::vector<int> order(labels.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return labels[a].time < labels[b].time; });
    KmCurve curve;
    double s = 1.0;
    std::size_t i = 0;
    const std::size_t n = labels.size();
    while (i < n) {
        const double t = labels[order[i]].time;
        int at_risk = static_cast<int>(n - i);
        int events = 0;
        std::size_t j = i;
        while (j < n && labels[order[j]].time == t) {
            if (labels[order[j]].event_observed()) ++events;
            ++j;
        }
        if (events > 0) {
            s *= 1.0 - static_cast<double>(events) / at_risk;
            curve.times.push_back(t);
            curve.survival.push_back(s);
            curve.n_risk.push_back(at_risk);
            curve.n_events.push_back(events);
        }
        i = j;
    }
    return curve;
}

// ---- chi-square tail via regularized incomplete gamma ----

namespace detail {

inline double gamma_p_series(double a, double x) {
    double ap = a;
    double sum = 1.0 / a;
    double del = sum;
    for (int i = 0; i < 1000; ++i) {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if (std::fabs(del) < std::fabs(sum) * 1e-16) break;
    }
    return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

inline double gamma_q_continued_fraction(double a, double x) {
    const double tiny = 1e-300;
    double b = x + 1.0 - a;
    double c = 1.0 / tiny;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i <= 1000; ++i) {
        const double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
        b += 2.0;
        d = an * d + b;
        if (std::fabs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double delta = d * c;
        h *= delta;
        if (std::fabs(delta - 1.0) < 1e-16) break;
    }
    return h * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

}  // namespace detail

// Regularized upper incomplete gamma Q(a, x); series for small x, continued
// fraction otherwise.
inline double regularized_gamma_q(double a, double x) {
    if (!(a > 0.0) || x < 0.0) throw NumericError("regularized_gamma_q: needs a > 0, x >= 0");
    if (x == 0.0) return 1.0;
    if (x < a + 1.0) return 1.0 - detail::gamma_p_series(a, x);
    return detail::gamma_q_continued_fraction(a, x);
}

// Upper tail of chi-square with k degrees of freedom.
inline double chi_square_upper_tail(double x, int dof = 1) {
    if (dof < 1) throw NumericError("chi_square_upper_tail: dof must be >= 1");
    if (x < 0.0) return 1.0;
    return regularized_gamma_q(0.5 * dof, 0.5 * x);
}

// ---- log-rank test ----

struct LogRankResult {
    double chi_square = 0.0;
    double p_value = 1.0;
};

// Two-group log-rank statistic: observed minus expected events under the
// hypergeometric null at each distinct event time, one degree of freedom.
inline LogRankResult log_rank_test(const std::vector<SurvivalLabel>& group_a,
                                   const std::vector<SurvivalLabel>& group_b) {
    if (group_a.empty() || group_b.empty())
        throw NumericError("log_rank_test: both groups must be non-empty");
    auto count_events = [](const std::vector<SurvivalLabel>& g) {
        int e = 0;
        for (const auto& l : g)
            if (l.event_observed()) ++e;
        return e;
    };
    if (count_events(group_a) == 0 && count_events(group_b) == 0)
        throw UndefinedStatError("log_rank_test: no events in either group");

    std::vector<double> event_times;
    for (const auto& l : group_a)
        if (l.event_observed()) event_times.push_back(l.time);
    for (const auto& l : group_b)
        if (l.event_observed()) event_times.push_back(l.time);
    std::sort(event_times.begin(), event_times.end());
    event_times.erase(std::unique(event_times.begin(), event_times.end()), event_times.end());

    double observed_a = 0.0, expected_a = 0.0, variance = 0.0;
    for (double t : event_times) {
        auto at_risk = [&](const std::vector<SurvivalLabel>& g) {
            int r = 0;
            for (const auto& l : g)
                if (l.time >= t) ++r;
            return r;
        };
        auto events_at = [&](const std::vector<SurvivalLabel>& g) {
            int e = 0;
            for (const auto& l : g)
                if (l.event_observed() && l.time == t) ++e;
            return e;
        };
        const double n1 = at_risk(group_a), n2 = at_risk(group_b);
        const double d1 = events_at(group_a), d2 = events_at(group_b);
        const double nn = n1 + n2, dd = d1 + d2;
        if (nn <= 0.0 || dd <= 0.0) continue;
        observed_a += d1;
        expected_a += dd * n1 / nn;
        if (nn > 1.0)
            variance += dd * (n1 / nn) * (n2 / nn) * (nn - dd) / (nn - 1.0);
    }
    const double diff = observed_a - expected_a;
    LogRankResult r;
    if (variance <= 0.0) {
        if (std::fabs(diff) < 1e-12) {
            r.chi_square = 0.0;
            r.p_value = 1.0;
            return r;
        }
        throw UndefinedStatError("log_rank_test: zero variance with nonzero observed-expected gap");
    }
    r.chi_square = diff * diff / variance;
    r.p_value = chi_square_upper_tail(r.chi_square, 1);
    return r;
}

}  // namespace rasa
