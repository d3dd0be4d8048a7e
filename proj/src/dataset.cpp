#include "cna/dataset.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace cna {

namespace {

std::vector<double> random_unit(Rng& rng, std::size_t dim) {
    std::vector<double> v(dim);
    double n = 0.0;
    do {
        n = 0.0;
        for (double& x : v) {
            x = rng.gaussian();
            n += x * x;
        }
        n = std::sqrt(n);
    } while (n < 1e-9);
    for (double& x : v) x /= n;
    return v;
}

} // namespace

bool LabeledSet::labels_available() const {
    return std::all_of(labels.begin(), labels.end(), [](long l) { return l >= 0; });
}

std::pair<LabeledSet, LabeledSet> generate_shift(const ShiftSpec& spec) {
    if (spec.separation <= 0.0 || spec.spread <= 0.0)
        throw std::invalid_argument("generate_shift: separation and spread must be positive");
    if (!spec.translation.empty() && spec.translation.size() != spec.dim)
        throw std::invalid_argument("generate_shift: translation width mismatch");
    Rng rng(spec.seed);

    std::vector<std::vector<double>> centers;
    for (std::size_t c = 0; c < spec.n_classes; ++c) {
        auto u = random_unit(rng, spec.dim);
        for (double& x : u) x *= spec.separation;
        centers.push_back(std::move(u));
    }

    // rotation plane from two orthonormal seeded directions
    std::vector<double> u = random_unit(rng, spec.dim);
    std::vector<double> v = random_unit(rng, spec.dim);
    {
        double uv = 0.0;
        for (std::size_t d = 0; d < spec.dim; ++d) uv += u[d] * v[d];
        double n = 0.0;
        for (std::size_t d = 0; d < spec.dim; ++d) {
            v[d] -= uv * u[d];
            n += v[d] * v[d];
        }
        n = std::sqrt(n);
        for (double& x : v) x /= n;
    }
    const double theta = spec.rotation_deg * 3.14159265358979323846 / 180.0;
    const double ct = std::cos(theta), st = std::sin(theta);
    auto rotate = [&](std::vector<double>& x) {
        double xu = 0.0, xv = 0.0;
        for (std::size_t d = 0; d < spec.dim; ++d) {
            xu += x[d] * u[d];
            xv += x[d] * v[d];
        }
        const double ru = xu * ct - xv * st;
        const double rv = xu * st + xv * ct;
        for (std::size_t d = 0; d < spec.dim; ++d)
            x[d] += (ru - xu) * u[d] + (rv - xv) * v[d];
    };

    auto draw_domain = [&](bool target) {
        LabeledSet set;
        const std::size_t n = spec.n_classes * spec.per_class;
        set.inputs = Tensor({n, spec.dim});
        set.labels.resize(n);
        set.domain_tag = target ? "target" : "source";
        std::size_t row = 0;
        for (std::size_t c = 0; c < spec.n_classes; ++c) {
            for (std::size_t i = 0; i < spec.per_class; ++i, ++row) {
                std::vector<double> x(spec.dim);
                for (std::size_t d = 0; d < spec.dim; ++d)
                    x[d] = centers[c][d] + spec.spread * rng.gaussian();
                if (target) {
                    rotate(x);
                    for (std::size_t d = 0; d < spec.dim; ++d) {
                        if (!spec.translation.empty()) x[d] += spec.translation[d];
                        x[d] += spec.extra_noise * rng.gaussian();
                    }
                }
                for (std::size_t d = 0; d < spec.dim; ++d) set.inputs.at(row, d) = x[d];
                set.labels[row] = static_cast<long>(c);
            }
        }
        return set;
    };

    LabeledSet source = draw_domain(false);
    LabeledSet target = draw_domain(true);
    return {std::move(source), std::move(target)};
}

LabeledSet pool_sources(const std::vector<LabeledSet>& sets) {
    if (sets.empty()) throw std::invalid_argument("pool_sources: no sets");
    const std::size_t dim = sets.front().inputs.cols();
    std::size_t total = 0;
    for (const LabeledSet& s : sets) {
        if (s.inputs.cols() != dim)
            throw std::invalid_argument("pool_sources: dimension mismatch");
        total += s.size();
    }
    LabeledSet pooled;
    pooled.inputs = Tensor({total, dim});
    pooled.labels.reserve(total);
    pooled.domain_tag = "pooled";
    std::size_t row = 0;
    for (const LabeledSet& s : sets) {
        for (std::size_t i = 0; i < s.size(); ++i, ++row)
            for (std::size_t d = 0; d < dim; ++d) pooled.inputs.at(row, d) = s.inputs.at(i, d);
        pooled.labels.insert(pooled.labels.end(), s.labels.begin(), s.labels.end());
    }
    return pooled;
}

// ---------------------------------------------------------------------------
// CSV / binary IO
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream is(line);
    while (std::getline(is, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}

double parse_number(const std::string& s, std::size_t line_no) {
    double v = 0.0;
    const char* b = s.data();
    const char* e = b + s.size();
    auto [p, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || p != e)
        throw std::runtime_error("csv line " + std::to_string(line_no) +
                                 ": non-numeric field '" + s + "'");
    return v;
}

} // namespace

LabeledSet load_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::string line;
    if (!std::getline(f, line)) throw std::runtime_error(path + ": empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> header = split_csv_line(line);

    std::size_t d = 0;
    while (d < header.size() && header[d] == "f" + std::to_string(d)) ++d;
    if (d == 0 || d >= header.size() || header[d] != "label")
        throw std::runtime_error(path + ": header must be f0,...,f{D-1},label[,domain]");
    const bool has_domain = header.size() == d + 2 && header[d + 1] == "domain";
    if (header.size() > d + (has_domain ? 2 : 1))
        throw std::runtime_error(path + ": unexpected trailing header columns");

    std::vector<double> values;
    std::vector<long> labels;
    std::string domain_tag;
    std::size_t line_no = 1;
    while (std::getline(f, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields = split_csv_line(line);
        if (fields.size() != header.size())
            throw std::runtime_error("csv line " + std::to_string(line_no) + ": expected " +
                                     std::to_string(header.size()) + " fields, got " +
                                     std::to_string(fields.size()));
        for (std::size_t i = 0; i < d; ++i) values.push_back(parse_number(fields[i], line_no));
        labels.push_back(static_cast<long>(parse_number(fields[d], line_no)));
        if (has_domain) {
            if (domain_tag.empty()) domain_tag = fields[d + 1];
            else if (domain_tag != fields[d + 1]) domain_tag = "mixed";
        }
    }
    LabeledSet set;
    set.inputs = Tensor({labels.size(), d}, std::move(values));
    set.labels = std::move(labels);
    set.domain_tag = domain_tag;
    return set;
}

void save_csv(const LabeledSet& set, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    const std::size_t d = set.inputs.cols();
    const bool has_domain = !set.domain_tag.empty();
    for (std::size_t i = 0; i < d; ++i) f << "f" << i << ",";
    f << "label";
    if (has_domain) f << ",domain";
    f << "\n";
    char buf[64];
    for (std::size_t r = 0; r < set.size(); ++r) {
        for (std::size_t c = 0; c < d; ++c) {
            snprintf(buf, sizeof buf, "%.17g", set.inputs.at(r, c));
            f << buf << ",";
        }
        f << set.labels[r];
        if (has_domain) f << "," << set.domain_tag;
        f << "\n";
    }
}

void save_binary(const Tensor& data, const std::vector<std::string>& columns,
                 const std::string& prefix) {
    if (!columns.empty() && columns.size() != data.cols())
        throw std::invalid_argument("save_binary: column-name count mismatch");
    nlohmann::ordered_json sidecar;
    sidecar["shape"] = data.shape;
    sidecar["dtype"] = "float64-le";
    sidecar["columns"] = columns;
    std::ofstream jf(prefix + ".json", std::ios::binary);
    if (!jf) throw std::runtime_error("cannot write " + prefix + ".json");
    jf << sidecar.dump(2) << "\n";
    std::ofstream bf(prefix + ".bin", std::ios::binary);
    if (!bf) throw std::runtime_error("cannot write " + prefix + ".bin");
    for (double v : data.values) {
        const std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
        bf.write(reinterpret_cast<const char*>(b), 8);
    }
}

} // namespace cna
