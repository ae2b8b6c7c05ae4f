#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace moviekit {

// Dense row-major tensor over a flat Eigen array. Shapes used throughout:
// {C,H,W} for feature maps, {N,D} for token/row matrices, {D} for vectors,
// {1} for scalars.
template <typename Scalar>
struct TensorT {
    using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
    using MatrixRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

    std::vector<int> shape;
    Array data;

    TensorT() = default;
    explicit TensorT(std::vector<int> s) : shape(std::move(s)) {
        data = Array::Zero(count(shape));
    }

    static int64_t count(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            if (d < 0) throw std::invalid_argument("negative tensor dim");
            n *= d;
        }
        return n;
    }

    static TensorT zeros(std::vector<int> s) { return TensorT(std::move(s)); }

    static TensorT full(std::vector<int> s, Scalar v) {
        TensorT t(std::move(s));
        t.data.setConstant(v);
        return t;
    }

    static TensorT scalar(Scalar v) { return full({1}, v); }

    static TensorT from(std::vector<int> s, std::initializer_list<Scalar> vals) {
        TensorT t(std::move(s));
        if ((int64_t)vals.size() != t.size()) throw std::invalid_argument("init list size mismatch");
        int64_t i = 0;
        for (Scalar v : vals) t.data[i++] = v;
        return t;
    }

    int64_t size() const { return data.size(); }
    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    int dim(int i) const { return shape.at(static_cast<size_t>(i)); }

    Scalar& operator[](int64_t i) { return data[i]; }
    Scalar operator[](int64_t i) const { return data[i]; }

    // {C,H,W} indexing
    Scalar& at(int c, int h, int w) {
        return data[(static_cast<int64_t>(c) * shape[1] + h) * shape[2] + w];
    }
    Scalar at(int c, int h, int w) const {
        return data[(static_cast<int64_t>(c) * shape[1] + h) * shape[2] + w];
    }

    // View the flat data as a rows x cols row-major matrix.
    Eigen::Map<MatrixRM> mat(int rows, int cols) {
        if (static_cast<int64_t>(rows) * cols != size()) throw std::invalid_argument("mat view size mismatch");
        return Eigen::Map<MatrixRM>(data.data(), rows, cols);
    }
    Eigen::Map<const MatrixRM> mat(int rows, int cols) const {
        if (static_cast<int64_t>(rows) * cols != size()) throw std::invalid_argument("mat view size mismatch");
        return Eigen::Map<const MatrixRM>(data.data(), rows, cols);
    }

    TensorT reshaped(std::vector<int> s) const {
        if (count(s) != size()) throw std::invalid_argument("reshape size mismatch");
        TensorT t;
        t.shape = std::move(s);
        t.data = data;
        return t;
    }

    bool all_finite() const { return data.isFinite().all(); }
};

using Tensor = TensorT<float>;

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) out += ",";
    }
    return out + ")";
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str(a.shape) +
                                    " vs " + shape_str(b.shape));
}

inline double mse(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mse");
    return (a.data - b.data).square().sum() / static_cast<double>(a.size());
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    return (a.data - b.data).abs().maxCoeff();
}

inline double l2_norm(const Tensor& a) { return std::sqrt(static_cast<double>(a.data.square().sum())); }

}  // namespace moviekit
