#include "tatl/stability.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include <json.hpp>

#include "tatl/errors.hpp"

namespace tatl {

void bound_inputs::validate() const {
    if (!(c > 0.0)) throw range_error("bound_inputs: c must be > 0");
    if (k_candidates == 0) throw range_error("bound_inputs: k_candidates must be >= 1");
    if (power_iters == 0) throw range_error("bound_inputs: power_iters must be >= 1");
    if (!(power_tol >= 0.0)) throw range_error("bound_inputs: power_tol must be >= 0");
    if (!(fd_step > 0.0)) throw range_error("bound_inputs: fd_step must be > 0");
}

namespace {

// Order-independent mean: sort, then compensated (Kahan) summation.  Any
// permutation of the inputs sums the same sorted sequence.
double stable_mean(std::vector<double> values) {
    std::sort(values.begin(), values.end());
    double sum = 0.0, comp = 0.0;
    for (double v : values) {
        const double y = v - comp;
        const double t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    return sum / static_cast<double>(values.size());
}

double norm2(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace

double empirical_risk(const param_set& params, const net_config& cfg,
                      const std::vector<labeled_sample>& data, const loss_config& loss) {
    if (data.empty()) throw data_error("empirical_risk: empty dataset");
    const segmenter net(cfg);
    std::vector<double> losses;
    losses.reserve(data.size());
    for (const labeled_sample& s : data) {
        const tensor_f prob = net.forward(s.image, params);
        losses.push_back(combined_loss(prob, s.target, loss).value);
    }
    return stable_mean(std::move(losses));
}

std::vector<double> hessian_vec(const grad_fn& grad, std::span<const double> w,
                                std::span<const double> v, double fd_step) {
    if (!(fd_step > 0.0)) throw range_error("hessian_vec: fd_step must be > 0");
    if (w.size() != v.size()) {
        throw dimension_error("hessian_vec: w and v sizes differ");
    }
    const double v_norm = norm2(v);
    if (v_norm == 0.0) throw range_error("hessian_vec: direction vector is zero");

    const double h = fd_step * (1.0 + norm2(w)) / v_norm;
    std::vector<double> shifted(w.begin(), w.end());
    for (std::size_t i = 0; i < w.size(); ++i) shifted[i] = w[i] + h * v[i];
    std::vector<double> g_plus = grad(shifted);
    for (std::size_t i = 0; i < w.size(); ++i) shifted[i] = w[i] - h * v[i];
    const std::vector<double> g_minus = grad(shifted);
    if (g_plus.size() != w.size() || g_minus.size() != w.size()) {
        throw dimension_error("hessian_vec: gradient size does not match weights");
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
        g_plus[i] = (g_plus[i] - g_minus[i]) / (2.0 * h);
    }
    return g_plus;
}

namespace {

// Gradient of the one-sample combined loss as a function of flat weights,
// evaluated on a scratch parameter set sharing the caller's layout.
std::vector<double> sample_grad(const segmenter& net, param_set& scratch,
                                const labeled_sample& s, std::span<const double> w,
                                const loss_config& loss) {
    scratch.assign_values(w);
    scratch.zero_grads();
    segmenter::cache cache;
    const tensor_f prob = net.forward(s.image, scratch, cache);
    const loss_result lr = combined_loss(prob, s.target, loss);
    net.backward(lr.grad, cache, scratch);
    return scratch.flatten_grads();
}

}  // namespace

std::vector<double> hessian_vec(const param_set& params, const net_config& cfg,
                                const labeled_sample& sample, std::span<const double> v,
                                double fd_step, const loss_config& loss) {
    const segmenter net(cfg);
    param_set scratch = params;
    const std::vector<double> w = params.flatten_values();
    const grad_fn grad = [&](std::span<const double> wx) {
        return sample_grad(net, scratch, sample, wx, loss);
    };
    return hessian_vec(grad, w, v, fd_step);
}

double spectral_norm(const matvec_fn& op, std::size_t dim, std::size_t iters, double tol,
                     std::uint64_t seed) {
    if (dim == 0) throw range_error("spectral_norm: dim must be positive");
    if (iters == 0) throw range_error("spectral_norm: iters must be positive");
    if (!(tol >= 0.0)) throw range_error("spectral_norm: tol must be >= 0");

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> b(dim);
    double b_norm = 0.0;
    do {
        for (double& x : b) x = gauss(rng);
        b_norm = norm2(b);
    } while (b_norm == 0.0);
    for (double& x : b) x /= b_norm;

    double estimate = 0.0;
    bool have_estimate = false;
    for (std::size_t it = 0; it < iters; ++it) {
        std::vector<double> ab = op(b);
        if (ab.size() != dim) {
            throw dimension_error("spectral_norm: operator changed the dimension");
        }
        double rayleigh = 0.0;
        for (std::size_t i = 0; i < dim; ++i) rayleigh += b[i] * ab[i];
        if (!std::isfinite(rayleigh)) {
            throw numerics_error("spectral_norm: non-finite Rayleigh quotient");
        }
        const double ab_norm = norm2(ab);
        if (!std::isfinite(ab_norm)) {
            throw numerics_error("spectral_norm: non-finite iterate");
        }
        if (ab_norm == 0.0) return 0.0;  // b is in the null space: zero operator seen

        const double current = std::abs(rayleigh);
        if (have_estimate && std::abs(current - estimate) <= tol * std::max(1.0, current)) {
            return current;
        }
        estimate = current;
        have_estimate = true;
        for (std::size_t i = 0; i < dim; ++i) b[i] = ab[i] / ab_norm;
    }
    return estimate;
}

gamma_stats make_gamma_stats(const std::vector<double>& per_sample_norms, double risk) {
    if (per_sample_norms.empty()) {
        throw data_error("make_gamma_stats: no per-sample norms");
    }
    if (!(risk >= 0.0)) throw range_error("make_gamma_stats: risk must be >= 0");

    gamma_stats g;
    g.mean_hessian_norm = stable_mean(per_sample_norms);
    g.empirical_risk = risk;
    g.gamma_hat = g.mean_hessian_norm + std::sqrt(risk);
    const double spread =
        std::pow(static_cast<double>(per_sample_norms.size()), -0.25);
    g.gamma_plus = g.gamma_hat + spread;
    g.gamma_minus = g.gamma_hat - spread;
    if (g.gamma_minus <= 0.0) {
        g.gamma_minus = 1e-6;
        g.clamped = true;
    }
    return g;
}

gamma_stats gamma_hat(const param_set& params, const net_config& cfg,
                      const std::vector<labeled_sample>& data, const bound_inputs& in,
                      const loss_config& loss) {
    in.validate();
    if (data.empty()) throw data_error("gamma_hat: empty dataset");

    const segmenter net(cfg);
    param_set scratch = params;
    const std::vector<double> w = params.flatten_values();
    const std::size_t dim = w.size();

    std::vector<double> norms;
    norms.reserve(data.size());
    for (const labeled_sample& s : data) {
        const grad_fn grad = [&](std::span<const double> wx) {
            return sample_grad(net, scratch, s, wx, loss);
        };
        const matvec_fn hess = [&](std::span<const double> v) {
            return hessian_vec(grad, w, v, in.fd_step);
        };
        // Every sample starts the power iteration from the same seeded
        // vector, so the per-sample norms depend only on sample content and
        // the full statistic is permutation-invariant.
        norms.push_back(spectral_norm(hess, dim, in.power_iters, in.power_tol, in.seed));
    }
    const double risk = empirical_risk(params, cfg, data, loss);
    return make_gamma_stats(norms, risk);
}

double bound_score(double gamma_plus, double gamma_minus, double risk, std::size_t m,
                   std::size_t k, double c) {
    if (m == 0) throw range_error("bound_score: m must be >= 1");
    if (k == 0) throw range_error("bound_score: k must be >= 1");
    if (!(c > 0.0)) throw range_error("bound_score: c must be > 0");
    if (!(gamma_minus > 0.0)) throw range_error("bound_score: gamma_minus must be > 0");
    if (!(risk >= 0.0)) throw range_error("bound_score: risk must be >= 0");

    const double cg_plus = c * gamma_plus;
    const double cg_minus = c * gamma_minus;
    const double exponent = cg_plus / (1.0 + cg_plus);
    const double risk_term = risk == 0.0 ? 0.0 : std::pow(risk, exponent);
    const double log_k = std::log(static_cast<double>(k));
    const double log_term = log_k > 0.0 ? std::sqrt(log_k) : 0.0;
    const double m_term = std::pow(static_cast<double>(m), 1.0 / (1.0 + cg_plus));
    const double score = (1.0 + 1.0 / cg_minus) * risk_term * log_term / m_term;
    if (!std::isfinite(score)) throw numerics_error("bound_score: non-finite score");
    return score;
}

bound_report compare_inits(
    const std::vector<std::pair<std::string, const param_set*>>& candidates,
    const net_config& cfg, const std::vector<labeled_sample>& data, const bound_inputs& in,
    const loss_config& loss) {
    if (candidates.empty()) throw data_error("compare_inits: no candidates");
    in.validate();
    if (data.empty()) throw data_error("compare_inits: empty dataset");

    bound_report report;
    report.m = data.size();
    report.c = in.c;
    report.k = candidates.size();
    report.seed = in.seed;
    report.assumptions = {
        "step-size admissibility (c bounded by the smoothness constant) is assumed, not checked",
        "Lipschitz-Hessian and smoothness constants of the loss are assumed finite, not estimated",
    };

    for (const auto& [name, params] : candidates) {
        if (params == nullptr) throw data_error("compare_inits: null candidate " + name);
        const gamma_stats g = gamma_hat(*params, cfg, data, in, loss);
        candidate_stats cs;
        cs.name = name;
        cs.empirical_risk = g.empirical_risk;
        cs.mean_hessian_norm = g.mean_hessian_norm;
        cs.gamma_hat = g.gamma_hat;
        cs.gamma_plus = g.gamma_plus;
        cs.gamma_minus = g.gamma_minus;
        cs.clamped = g.clamped;
        cs.bound_score =
            bound_score(g.gamma_plus, g.gamma_minus, g.empirical_risk, report.m, report.k, in.c);
        report.candidates.push_back(std::move(cs));
    }

    const candidate_stats* best = &report.candidates.front();
    for (const candidate_stats& cs : report.candidates) {
        if (cs.bound_score < best->bound_score ||
            (cs.bound_score == best->bound_score && cs.name < best->name)) {
            best = &cs;
        }
    }
    report.selected = best->name;
    return report;
}

std::string bound_report_json(const bound_report& report) {
    nlohmann::json j;
    j["m"] = report.m;
    j["c"] = report.c;
    j["K"] = report.k;
    j["seed"] = report.seed;
    j["assumptions"] = report.assumptions;
    j["selected"] = report.selected;
    nlohmann::json arr = nlohmann::json::array();
    for (const candidate_stats& cs : report.candidates) {
        nlohmann::json cj;
        cj["candidate"] = cs.name;
        cj["empirical_risk"] = cs.empirical_risk;
        cj["mean_hessian_norm"] = cs.mean_hessian_norm;
        cj["gamma_hat"] = cs.gamma_hat;
        cj["gamma_plus"] = cs.gamma_plus;
        cj["gamma_minus"] = cs.gamma_minus;
        cj["clamped"] = cs.clamped;
        cj["bound_score"] = cs.bound_score;
        arr.push_back(std::move(cj));
    }
    j["candidates"] = std::move(arr);
    return j.dump(2) + "\n";
}

void write_bound_report(const bound_report& report, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("write_bound_report: cannot open " + path.string());
    out << bound_report_json(report);
    if (!out) throw io_error("write_bound_report: write failed for " + path.string());
}

}  // namespace tatl
