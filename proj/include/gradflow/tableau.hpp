#pragma once

// Multistage coefficient tables (gamma, theta) for the variational ARK IMEX
// scheme, the builtin catalogue and a plain-text file format.
//
// Stage m (1..M) of a step combines the previous stages U_0..U_{m-1} with
// weights gamma(m, i) in the movement penalty and theta(m, i) in the
// linearization of the explicit energy.  Both tables are strictly lower
// triangular: entry (m, i) exists only for i < m.

#include <gradflow/error.hpp>

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <initializer_list>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace gradflow {

/// Packed strictly lower-triangular table indexed (m, i), 1 <= m <= M, 0 <= i < m.
class LowerTriangular {
public:
    LowerTriangular() = default;
    explicit LowerTriangular(int stages, double fill = 0.0)
        : stages_(stages), values_(static_cast<std::size_t>(stages * (stages + 1) / 2), fill) {}

    /// Rows given top to bottom; row m must hold exactly m entries.
    static LowerTriangular from_rows(const std::vector<std::vector<double>>& rows) {
        LowerTriangular t(static_cast<int>(rows.size()));
        for (int m = 1; m <= t.stages_; ++m) {
            const auto& row = rows[static_cast<std::size_t>(m - 1)];
            if (static_cast<int>(row.size()) != m) {
                throw TableauError(TableauError::Kind::shape,
                                   fmt::format("row {} has {} entries, expected {}", m,
                                               row.size(), m));
            }
            for (int i = 0; i < m; ++i) t(m, i) = row[static_cast<std::size_t>(i)];
        }
        return t;
    }

    int stages() const noexcept { return stages_; }
    std::size_t size() const noexcept { return values_.size(); }

    double& operator()(int m, int i) { return values_[index(m, i)]; }
    double operator()(int m, int i) const { return values_[index(m, i)]; }

    /// Flat access in row-major packed order, used by the polisher.
    double& flat(std::size_t k) { return values_[k]; }
    double flat(std::size_t k) const { return values_[k]; }

    static std::size_t index(int m, int i) noexcept {
        return static_cast<std::size_t>(m * (m - 1) / 2 + i);
    }

    double row_sum(int m) const {
        double s = 0.0;
        for (int i = 0; i < m; ++i) s += (*this)(m, i);
        return s;
    }

    bool operator==(const LowerTriangular&) const = default;

private:
    int stages_ = 0;
    std::vector<double> values_;
};

struct Tableau {
    int stages = 0;
    LowerTriangular gamma;
    /// Absent for fully implicit schemes, where the whole energy is implicit.
    std::optional<LowerTriangular> theta;
    std::string label;
    int claimed_order = 1;
    std::optional<double> claimed_threshold;
    /// Set for the predictor tables of the metric schemes: the stage expansion
    /// must match beta_1 = 1 and beta_2 (= beta_3) = *predictor_target instead
    /// of the usual order conditions.
    std::optional<double> predictor_target;

    bool fully_implicit() const noexcept { return !theta.has_value(); }
    double row_sum(int m) const { return gamma.row_sum(m); }
    double theta_at(int m, int i) const { return theta ? (*theta)(m, i) : (i == 0 ? 1.0 : 0.0); }

    bool same_coefficients(const Tableau& other) const {
        return stages == other.stages && gamma == other.gamma && theta == other.theta;
    }
};

/// Tolerance for theta checks on coefficients printed to three decimals.
inline constexpr double printed_theta_tolerance = 2e-3;

struct ValidationOptions {
    double theta_tolerance = printed_theta_tolerance;
    /// Enforce theta >= 0, unit row sums and column monotonicity.
    bool require_stable_theta = true;
};

inline void validate(const Tableau& t, const ValidationOptions& opts = {}) {
    using Kind = TableauError::Kind;
    if (t.stages < 1) throw TableauError(Kind::shape, "tableau needs at least one stage");
    if (t.gamma.stages() != t.stages || (t.theta && t.theta->stages() != t.stages)) {
        throw TableauError(Kind::shape, "gamma/theta shape does not match stage count");
    }
    for (int m = 1; m <= t.stages; ++m) {
        const double s = t.row_sum(m);
        if (!(s > 0.0)) {
            throw TableauError(Kind::nonpositive_row_sum,
                               fmt::format("nonpositive stage row sum S_{} = {}", m, s));
        }
    }
    if (!t.theta || !opts.require_stable_theta) return;

    const auto& th = *t.theta;
    const double tol = opts.theta_tolerance;
    for (int m = 1; m <= t.stages; ++m) {
        for (int i = 0; i < m; ++i) {
            if (th(m, i) < -tol) {
                throw TableauError(Kind::negative_theta,
                                   fmt::format("negative theta({}, {}) = {}", m, i, th(m, i)));
            }
        }
        const double s = th.row_sum(m);
        if (std::abs(s - 1.0) > tol) {
            throw TableauError(Kind::theta_row_sum,
                               fmt::format("theta row sum of row {} is {}, expected 1", m, s));
        }
        if (m >= 2) {
            for (int i = 0; i < m - 1; ++i) {
                if (th(m - 1, i) < th(m, i) - tol) {
                    throw TableauError(Kind::theta_not_monotone,
                                       fmt::format("theta({}, {}) = {} exceeds theta({}, {}) = {}",
                                                   m, i, th(m, i), m - 1, i, th(m - 1, i)));
                }
            }
        }
    }
}

namespace detail {

inline Tableau make_tableau(std::string label, int order,
                            std::initializer_list<std::initializer_list<double>> gamma,
                            std::optional<std::initializer_list<std::initializer_list<double>>> theta,
                            std::optional<double> threshold,
                            std::optional<double> predictor = std::nullopt) {
    auto rows = [](std::initializer_list<std::initializer_list<double>> l) {
        std::vector<std::vector<double>> r;
        for (const auto& row : l) r.emplace_back(row);
        return r;
    };
    Tableau t;
    t.label = std::move(label);
    t.claimed_order = order;
    t.gamma = LowerTriangular::from_rows(rows(gamma));
    t.stages = t.gamma.stages();
    if (theta) t.theta = LowerTriangular::from_rows(rows(*theta));
    t.claimed_threshold = threshold;
    t.predictor_target = predictor;
    return t;
}

}  // namespace detail

inline std::vector<std::string> builtin_names() {
    return {"be", "si2", "si3", "si1c", "si1125c", "fi2", "fi3", "fi1125"};
}

/// Builtin tables at the precision they were published with.  `polish`
/// (verify.hpp) refines them onto the order-condition manifold.
inline Tableau builtin(std::string_view name) {
    using detail::make_tableau;
    constexpr double inf = std::numeric_limits<double>::infinity();

    if (name == "be") {
        return make_tableau("be", 1, {{1.0}}, {{{1.0}}}, 1.0);
    }
    if (name == "si2") {
        return make_tableau("si2", 2,
                            {{8.841},
                             {-0.925, 5.360},
                             {-4.443, 6.041, 0.950},
                             {-3.288, 5.895, -0.351, 0.172},
                             {-3.895, -0.335, 4.964, -1.722, 7.684}},
                            {{{1.0},
                              {0.009, 0.991},
                              {0.009, 0.991, 0.0},
                              {0.0, 0.0, 0.0, 1.0},
                              {0.0, 0.0, 0.0, 1.0, 0.0}}},
                            3.0 / 872.0);
    }
    if (name == "si3") {
        return make_tableau(
            "si3", 3,
            {{11.0},
             {2.1, 15.5},
             {1.4, 1.6, 17.0},
             {0.2, 1.6, -2.4, 18.1},
             {0.3, -8.5, 3.0, 9.6, 7.8},
             {-1.4, -5.9, -0.1, 2.0, 8.0, 4.1},
             {-4.0, -0.5, -0.4, -1.8, 5.1, 6.8, 0.9},
             {-9.2, 4.8, 2.7, -3.2, 2.5, 6.2, 2.5, 4.6},
             {-1.7, -3.6, -0.1, 1.3, 5.7, 3.4, -0.8, -0.8, 0.4},
             {-2.7, -3.5, 0.6, 1.4, 6.1, 3.5, -0.7, -0.2, -0.4, 0.5},
             {5.9, -4.8, -5.1, -3.1, 3.4, 6.6, -0.7, -5.2, 4.9, -0.8, 8.2},
             {7.1, 0.9, -3.1, -2.7, -5.8, -1.9, 0.6, -3.4, 4.3, -1.3, 9.2, 9.1},
             {3.8, 1.9, 2.7, 2.1, -7.5, -10.6, -1.2, 2.0, 0.7, -0.2, -0.2, 9.5, 12.8}},
            {{{1.0},
              {0.049, 0.951},
              {0.024, 0.075, 0.901},
              {0.017, 0.042, 0.113, 0.829},
              {0.012, 0.029, 0.071, 0.386, 0.501},
              {0.01, 0.023, 0.06, 0.366, 0.457, 0.085},
              {0.007, 0.018, 0.05, 0.351, 0.437, 0.06, 0.076},
              {0.003, 0.005, 0.006, 0.008, 0.009, 0.011, 0.028, 0.929},
              {0.002, 0.002, 0.002, 0.002, 0.003, 0.004, 0.009, 0.029, 0.948},
              {0.0, 0.001, 0.001, 0.001, 0.001, 0.002, 0.004, 0.007, 0.011, 0.971},
              {0.0, 0.0, 0.001, 0.001, 0.001, 0.001, 0.003, 0.005, 0.008, 0.912, 0.069},
              {0.0, 0.0, 0.0, 0.0, 0.0, 0.001, 0.002, 0.003, 0.005, 0.107, 0.025, 0.857},
              {0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.001, 0.001, 0.002, 0.013, 0.007, 0.018, 0.958}}},
            18.0 / 28567.0);
    }
    if (name == "si1c") {
        // Predictor for the third order metric scheme: matches the backward
        // Euler expansion to second order, beta_2 = beta_3 = 1.
        return make_tableau("si1c", 1, {{1.833}, {0.556, 0.667}, {1.030, -0.026, 0.159}},
                            {{{1.0}, {0.333, 0.667}, {0.0, 0.0, 1.000}}}, std::nullopt, 1.0);
    }
    if (name == "si1125c") {
        return make_tableau("si1125c", 1,
                            {{7.727},
                             {0.594, 2.241},
                             {3.056, -0.455, 0.636},
                             {-1.571, 5.091, -1.063, 2.786},
                             {-3.714, 3.1, -1.267, 1.545, 9.655},
                             {-6.923, 5.1, -2.056, 3.471, 4.571, 4.033},
                             {-2.467, -2.1, 0.009, -0.182, 0.660, 7.224, 9.428}},
                            {{{1.0},
                              {0.708, 0.292},
                              {0.013, 0.018, 0.969},
                              {0.008, 0.012, 0.867, 0.113},
                              {0.006, 0.009, 0.206, 0.056, 0.724},
                              {0.0, 0.005, 0.05, 0.025, 0.053, 0.867},
                              {0.0, 0.0, 0.015, 0.009, 0.015, 0.04, 0.920}}},
                            std::nullopt, 11.0 / 25.0);
    }
    if (name == "fi2") {
        return make_tableau("fi2", 2, {{5.0}, {-2.0, 6.0}, {-2.0, 0.22, 6.29}}, std::nullopt, inf);
    }
    if (name == "fi3") {
        return make_tableau("fi3", 3,
                            {{11.17},
                             {-7.5, 19.43},
                             {-1.05, -4.75, 13.98},
                             {1.8, 0.05, -7.83, 13.8},
                             {6.2, -7.17, -1.33, 1.63, 11.52},
                             {-2.83, 4.69, 2.46, -11.55, 6.68, 11.95}},
                            std::nullopt, inf);
    }
    if (name == "fi1125") {
        return make_tableau("fi1125", 1,
                            {{6.17}, {-0.5, 6.0}, {-3.0, 2.0, 7.0}, {-3.1, 0.0, 2.23, 7.40}},
                            std::nullopt, inf, 11.0 / 25.0);
    }
    throw UnknownNameError("tableau", std::string(name));
}

// --- text format -----------------------------------------------------------
//
//   M <int>
//   theta <present|absent>
//   M lines of gamma rows, then (if present) M lines of theta rows.
//
// '#' starts a comment.  Comment lines of the form "#! key value" carry the
// optional label, order, threshold and predictor metadata; readers that only
// know the core format skip them as ordinary comments.

inline void write(std::ostream& os, const Tableau& t) {
    if (!t.label.empty()) os << "#! label " << t.label << '\n';
    os << "#! order " << t.claimed_order << '\n';
    if (t.claimed_threshold) os << fmt::format("#! threshold {:.17g}\n", *t.claimed_threshold);
    if (t.predictor_target) os << fmt::format("#! predictor {:.17g}\n", *t.predictor_target);
    os << "M " << t.stages << '\n';
    os << "theta " << (t.theta ? "present" : "absent") << '\n';
    auto rows = [&](const LowerTriangular& tab) {
        for (int m = 1; m <= t.stages; ++m) {
            for (int i = 0; i < m; ++i) os << (i ? " " : "") << fmt::format("{:.17g}", tab(m, i));
            os << '\n';
        }
    };
    rows(t.gamma);
    if (t.theta) rows(*t.theta);
}

namespace detail {

inline double parse_double(std::string_view tok, int line) {
    double v = 0.0;
    const auto* first = tok.data();
    const auto* last = tok.data() + tok.size();
    if (!tok.empty() && *first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc{} || ptr != last) {
        throw TableauError(TableauError::Kind::malformed,
                           fmt::format("line {}: cannot parse number '{}'", line, tok));
    }
    return v;
}

inline std::vector<std::string> split(const std::string& s) {
    std::istringstream is(s);
    std::vector<std::string> out;
    for (std::string tok; is >> tok;) out.push_back(tok);
    return out;
}

}  // namespace detail

inline Tableau read(std::istream& is, const ValidationOptions& opts = {}) {
    using Kind = TableauError::Kind;
    Tableau t;
    std::vector<std::pair<int, std::vector<std::string>>> body;
    std::string line;
    for (int lineno = 1; std::getline(is, line); ++lineno) {
        if (line.rfind("#!", 0) == 0) {
            auto toks = detail::split(line.substr(2));
            if (toks.size() < 2) continue;
            if (toks[0] == "label") t.label = toks[1];
            else if (toks[0] == "order") t.claimed_order = static_cast<int>(detail::parse_double(toks[1], lineno));
            else if (toks[0] == "threshold") t.claimed_threshold = detail::parse_double(toks[1], lineno);
            else if (toks[0] == "predictor") t.predictor_target = detail::parse_double(toks[1], lineno);
            continue;
        }
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        auto toks = detail::split(line);
        if (!toks.empty()) body.emplace_back(lineno, std::move(toks));
    }
    if (body.size() < 2) throw TableauError(Kind::malformed, "missing 'M' or 'theta' header line");

    const auto& [l1, h1] = body[0];
    if (h1.size() != 2 || h1[0] != "M") {
        throw TableauError(Kind::malformed, fmt::format("line {}: expected 'M <int>'", l1));
    }
    const double mval = detail::parse_double(h1[1], l1);
    if (mval < 1 || mval != std::floor(mval) || mval > 1000) {
        throw TableauError(Kind::malformed, fmt::format("line {}: invalid stage count", l1));
    }
    t.stages = static_cast<int>(mval);

    const auto& [l2, h2] = body[1];
    if (h2.size() != 2 || h2[0] != "theta" || (h2[1] != "present" && h2[1] != "absent")) {
        throw TableauError(Kind::malformed,
                           fmt::format("line {}: expected 'theta <present|absent>'", l2));
    }
    const bool has_theta = h2[1] == "present";
    const std::size_t expected = 2 + static_cast<std::size_t>(t.stages) * (has_theta ? 2 : 1);
    if (body.size() != expected) {
        throw TableauError(Kind::shape, fmt::format("expected {} coefficient rows, found {}",
                                                    expected - 2, body.size() - 2));
    }

    auto read_table = [&](std::size_t offset) {
        LowerTriangular tab(t.stages);
        for (int m = 1; m <= t.stages; ++m) {
            const auto& [ln, toks] = body[offset + static_cast<std::size_t>(m - 1)];
            if (static_cast<int>(toks.size()) != m) {
                throw TableauError(Kind::shape,
                                   fmt::format("line {}: row {} is not lower triangular ({} entries)",
                                               ln, m, toks.size()));
            }
            for (int i = 0; i < m; ++i) {
                tab(m, i) = detail::parse_double(toks[static_cast<std::size_t>(i)], ln);
            }
        }
        return tab;
    };
    t.gamma = read_table(2);
    if (has_theta) t.theta = read_table(2 + static_cast<std::size_t>(t.stages));
    validate(t, opts);
    return t;
}

inline Tableau load(const std::string& path, const ValidationOptions& opts = {}) {
    std::ifstream in(path);
    if (!in) throw TableauError(TableauError::Kind::io, "cannot open tableau file " + path);
    return read(in, opts);
}

inline void save(const Tableau& t, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw TableauError(TableauError::Kind::io, "cannot write tableau file " + path);
    write(out, t);
}

/// A builtin name or a path to a tableau file.
inline Tableau resolve_tableau(const std::string& name_or_path) {
    const auto names = builtin_names();
    if (std::find(names.begin(), names.end(), name_or_path) != names.end()) {
        return builtin(name_or_path);
    }
    return load(name_or_path);
}

}  // namespace gradflow
