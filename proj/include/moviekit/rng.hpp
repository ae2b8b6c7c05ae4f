#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "moviekit/tensor.hpp"

namespace moviekit {

// Explicit-state RNG passed into every sampling operation. The normal draw is
// a two-uniform Box-Muller without a cached spare so that serialized state
// fully determines the stream.
class Rng {
   public:
    explicit Rng(uint64_t seed = 0) : engine_(seed) {}

    uint64_t raw() { return engine_(); }

    // uniform in [0, 1)
    double uniform() {
        return std::generate_canonical<double, 53>(engine_);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // integer uniform over [0, n)
    int uniform_int(int n) {
        return static_cast<int>(std::min<double>(n - 1, std::floor(uniform() * n)));
    }

    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    Tensor normal_tensor(std::vector<int> shape, float mean = 0.f, float stddev = 1.f) {
        Tensor t(std::move(shape));
        for (int64_t i = 0; i < t.size(); ++i) t.data[i] = static_cast<float>(normal(mean, stddev));
        return t;
    }

    Tensor uniform_tensor(std::vector<int> shape, float lo, float hi) {
        Tensor t(std::move(shape));
        for (int64_t i = 0; i < t.size(); ++i) t.data[i] = static_cast<float>(uniform(lo, hi));
        return t;
    }

    std::string serialize() const {
        std::ostringstream ss;
        ss << engine_;
        return ss.str();
    }

    void deserialize(const std::string& s) {
        std::istringstream ss(s);
        ss >> engine_;
        if (ss.fail()) throw std::runtime_error("bad rng state");
    }

   private:
    std::mt19937_64 engine_;
};

}  // namespace moviekit
