#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cna/cluster_stats.hpp"
#include "cna/rng.hpp"

#include <cmath>

using namespace cna;

namespace {

std::vector<double> unit_vec(Rng& rng, std::size_t dim) {
    std::vector<double> v(dim);
    double n = 0.0;
    do {
        n = 0.0;
        for (double& x : v) {
            x = rng.gaussian();
            n += x * x;
        }
        n = std::sqrt(n);
    } while (n < 1e-6);
    for (double& x : v) x /= n;
    return v;
}

// Independent oracle for the responsibility: normalized Gaussian densities
// exp(-|f - mu_k|^2 / (2 sigma_k)) / sum_k, computed through the squared
// distance rather than the dot-product shortcut.
std::vector<double> density_oracle(const std::vector<double>& f, const ClusterStats& s) {
    const std::size_t C = s.mu.size();
    std::vector<double> dens(C);
    for (std::size_t k = 0; k < C; ++k) {
        double sq = 0.0;
        for (std::size_t d = 0; d < f.size(); ++d) {
            const double diff = f[d] - s.mu[k][d];
            sq += diff * diff;
        }
        dens[k] = std::exp(-sq / (2.0 * s.sigma[k]));
    }
    double z = 0.0;
    for (double v : dens) z += v;
    for (double& v : dens) v /= z;
    return dens;
}

std::vector<double> onehot(std::size_t c, std::size_t n) {
    std::vector<double> v(n, 0.0);
    v[c] = 1.0;
    return v;
}

} // namespace

TEST_CASE("identical features collapse to the floor variance") {
    std::vector<double> v{0.6, 0.8};
    ClusterStats s = compute_stats({v, v}, {onehot(0, 2), onehot(0, 2)}, 2);
    CHECK(s.mu[0][0] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(s.mu[0][1] == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(s.sigma[0] == 1e-4);
    // class 1 got no mass: fallback
    CHECK(s.fallback_classes == std::vector<std::size_t>{1});
}

TEST_CASE("two unit features at +-45 degrees average to the bisector") {
    const double r = std::sqrt(0.5);
    ClusterStats s = compute_stats({{r, r}, {r, -r}}, {onehot(0, 1), onehot(0, 1)}, 1);
    CHECK(s.mu[0][0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(s.mu[0][1] == doctest::Approx(0.0).epsilon(1e-12));
    // weighted spread: |f - mu|^2 = (1-r)^2 + r^2 for both points
    const double expect = (1 - r) * (1 - r) + r * r;
    CHECK(s.sigma[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("uniform posteriors make all prototypes equal") {
    Rng rng(4);
    std::vector<std::vector<double>> feats{unit_vec(rng, 3), unit_vec(rng, 3)};
    ClusterStats s = compute_stats(feats, {{0.5, 0.5}, {0.5, 0.5}}, 2);
    for (std::size_t d = 0; d < 3; ++d)
        CHECK(s.mu[0][d] == doctest::Approx(s.mu[1][d]).epsilon(1e-12));
    CHECK(s.sigma[0] == doctest::Approx(s.sigma[1]).epsilon(1e-12));
}

TEST_CASE("massless class keeps previous stats when available") {
    ClusterStats prev;
    prev.mu = {{1, 0}, {0, 1}};
    prev.sigma = {0.3, 0.7};
    ClusterStats s = compute_stats({{1, 0}}, {onehot(0, 2)}, 2, 1e-4, &prev);
    CHECK(s.mu[1] == std::vector<double>{0, 1});
    CHECK(s.sigma[1] == 0.7);
    CHECK(s.fallback_classes == std::vector<std::size_t>{1});
}

TEST_CASE("clean probability symmetric case") {
    ClusterStats s;
    s.mu = {{1, 0}, {0, 1}};
    s.sigma = {0.5, 0.5};
    const double r = std::sqrt(0.5);
    CleanProbability cp = clean_probability({r, r}, 0, s);
    CHECK(cp.gamma[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(cp.clean == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("clean probability at the prototype with an orthogonal alternative") {
    // f = mu_0, mu_1 orthogonal, sigma = 0.5: gamma_0 = e^2/(e^2 + 1)
    ClusterStats s;
    s.mu = {{1, 0}, {0, 1}};
    s.sigma = {0.5, 0.5};
    CleanProbability cp = clean_probability({1, 0}, 0, s);
    const double expect = std::exp(2.0) / (std::exp(2.0) + 1.0);
    CHECK(cp.clean == doctest::Approx(expect).epsilon(1e-9));
    CHECK(cp.clean == doctest::Approx(0.8808).epsilon(1e-4));
}

TEST_CASE("gamma is a simplex vector") {
    Rng rng(12);
    ClusterStats s;
    for (int k = 0; k < 5; ++k) {
        s.mu.push_back(unit_vec(rng, 6));
        s.sigma.push_back(rng.uniform(0.05, 2.0));
    }
    for (int rep = 0; rep < 100; ++rep) {
        CleanProbability cp = clean_probability(unit_vec(rng, 6), rep % 5, s);
        double total = 0.0;
        for (double g : cp.gamma) total += g;
        CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("dot-product responsibilities equal normalized gaussian densities") {
    // the |f - mu|^2 = 2 - 2 f.mu identity for unit vectors, checked against
    // the density computed the long way
    Rng rng(99);
    for (int rep = 0; rep < 1000; ++rep) {
        ClusterStats s;
        const std::size_t C = 2 + rng.below(5);
        for (std::size_t k = 0; k < C; ++k) {
            s.mu.push_back(unit_vec(rng, 8));
            s.sigma.push_back(rng.uniform(0.05, 3.0));
        }
        const auto f = unit_vec(rng, 8);
        CleanProbability cp = clean_probability(f, 0, s);
        const auto oracle = density_oracle(f, s);
        for (std::size_t k = 0; k < C; ++k)
            REQUIRE(cp.gamma[k] == doctest::Approx(oracle[k]).epsilon(1e-9));
    }
}

TEST_CASE("gamma is invariant under a joint rotation of features and prototypes") {
    Rng rng(123);
    // rotate in the (0,1) plane by a random angle: dot products preserved
    const double theta = rng.uniform(0.0, 6.28);
    auto rotate = [theta](std::vector<double> v) {
        const double c = std::cos(theta), s = std::sin(theta);
        const double a = v[0], b = v[1];
        v[0] = c * a - s * b;
        v[1] = s * a + c * b;
        return v;
    };
    ClusterStats s;
    for (int k = 0; k < 4; ++k) {
        s.mu.push_back(unit_vec(rng, 5));
        s.sigma.push_back(rng.uniform(0.1, 1.5));
    }
    ClusterStats sr = s;
    for (auto& m : sr.mu) m = rotate(m);
    for (int rep = 0; rep < 50; ++rep) {
        const auto f = unit_vec(rng, 5);
        CleanProbability a = clean_probability(f, 1, s);
        CleanProbability b = clean_probability(rotate(f), 1, sr);
        for (std::size_t k = 0; k < 4; ++k)
            CHECK(a.gamma[k] == doctest::Approx(b.gamma[k]).epsilon(1e-9));
    }
}

TEST_CASE("shrinking all sigmas by a common factor sharpens gamma") {
    Rng rng(321);
    for (int rep = 0; rep < 100; ++rep) {
        ClusterStats s;
        for (int k = 0; k < 4; ++k) {
            s.mu.push_back(unit_vec(rng, 6));
            s.sigma.push_back(rng.uniform(0.2, 2.0));
        }
        ClusterStats sharp = s;
        for (double& x : sharp.sigma) x *= 0.5;
        const auto f = unit_vec(rng, 6);
        CleanProbability a = clean_probability(f, 0, s);
        CleanProbability b = clean_probability(f, 0, sharp);
        const double amax = *std::max_element(a.gamma.begin(), a.gamma.end());
        const double bmax = *std::max_element(b.gamma.begin(), b.gamma.end());
        CHECK(bmax >= amax - 1e-12);
    }
}

TEST_CASE("partition thresholds with a closed clean boundary") {
    CHECK(partition(0.6, 0.5) == RegionTag::Clean);
    CHECK(partition(0.5, 0.5) == RegionTag::Clean);
    CHECK(partition(0.49, 0.5) == RegionTag::Noisy);
}

TEST_CASE("raising alpha only shrinks the clean set") {
    Rng rng(7);
    ClusterStats s;
    for (int k = 0; k < 3; ++k) {
        s.mu.push_back(unit_vec(rng, 4));
        s.sigma.push_back(rng.uniform(0.1, 1.0));
    }
    std::vector<double> cleans;
    for (int i = 0; i < 200; ++i)
        cleans.push_back(clean_probability(unit_vec(rng, 4), rng.below(3), s).clean);
    const std::vector<double> alphas{0.1, 0.3, 0.5, 0.7, 0.9};
    for (std::size_t a = 0; a + 1 < alphas.size(); ++a) {
        for (double c : cleans) {
            const bool lo = partition(c, alphas[a]) == RegionTag::Clean;
            const bool hi = partition(c, alphas[a + 1]) == RegionTag::Clean;
            if (hi) CHECK(lo); // clean under the stricter alpha implies clean under the looser
        }
    }
}
