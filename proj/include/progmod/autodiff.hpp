#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "progmod/core.hpp"

namespace progmod::ad {

using Mat = Eigen::MatrixXd;

// Reverse-mode autodiff over dense matrices. Nodes are appended in forward
// order, which is already a topological order, so the backward pass is a
// single reverse sweep. A Tape is built per loss evaluation and discarded.
class Tape;

struct Var {
    Tape* tape = nullptr;
    int id = -1;

    const Mat& value() const;
    const Mat& grad() const;
};

class Tape {
public:
    Var leaf(Mat value, bool requires_grad) {
        nodes_.push_back(Node{std::move(value), Mat(), requires_grad, nullptr});
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    Var constant(Mat value) { return leaf(std::move(value), false); }

    const Mat& val(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    const Mat& grad_of(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
    bool requires_grad(int id) const {
        return nodes_[static_cast<std::size_t>(id)].requires_grad;
    }

    void accumulate(int id, const Mat& g) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.requires_grad) return;
        if (n.grad.size() == 0)
            n.grad = g;
        else
            n.grad += g;
    }

    // Runs the reverse sweep from a 1x1 scalar node.
    void backward(const Var& root) {
        Node& r = nodes_[static_cast<std::size_t>(root.id)];
        if (r.value.rows() != 1 || r.value.cols() != 1)
            throw std::invalid_argument("backward: root must be a 1x1 scalar");
        for (auto& n : nodes_) n.grad.resize(0, 0);
        r.grad = Mat::Ones(1, 1);
        for (int i = root.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.pull && n.requires_grad && n.grad.size() != 0) n.pull(*this);
        }
    }

    std::size_t size() const { return nodes_.size(); }

    template <class F>
    Var emit(Mat value, bool requires_grad, F&& pull) {
        nodes_.push_back(Node{std::move(value), Mat(), requires_grad,
                              std::function<void(Tape&)>(std::forward<F>(pull))});
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

private:
    struct Node {
        Mat value;
        Mat grad;
        bool requires_grad;
        std::function<void(Tape&)> pull;
    };
    std::vector<Node> nodes_;
};

inline const Mat& Var::value() const { return tape->val(id); }
inline const Mat& Var::grad() const { return tape->grad_of(id); }

namespace detail {
inline void same_shape(const Var& a, const Var& b, const char* op) {
    if (a.value().rows() != b.value().rows() || a.value().cols() != b.value().cols())
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
}
}  // namespace detail

inline Var add(Var a, Var b) {
    detail::same_shape(a, b, "add");
    Tape& t = *a.tape;
    bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
    return t.emit(a.value() + b.value(), rg, [ia = a.id, ib = b.id, io = (int)t.size()](Tape& tp) {
        tp.accumulate(ia, tp.grad_of(io));
        tp.accumulate(ib, tp.grad_of(io));
    });
}

inline Var sub(Var a, Var b) {
    detail::same_shape(a, b, "sub");
    Tape& t = *a.tape;
    bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
    return t.emit(a.value() - b.value(), rg, [ia = a.id, ib = b.id, io = (int)t.size()](Tape& tp) {
        tp.accumulate(ia, tp.grad_of(io));
        tp.accumulate(ib, -tp.grad_of(io));
    });
}

inline Var mul(Var a, Var b) {
    detail::same_shape(a, b, "mul");
    Tape& t = *a.tape;
    bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
    return t.emit(a.value().cwiseProduct(b.value()), rg,
                  [ia = a.id, ib = b.id, io = (int)t.size()](Tape& tp) {
                      tp.accumulate(ia, tp.grad_of(io).cwiseProduct(tp.val(ib)));
                      tp.accumulate(ib, tp.grad_of(io).cwiseProduct(tp.val(ia)));
                  });
}

inline Var div(Var a, Var b) {
    detail::same_shape(a, b, "div");
    Tape& t = *a.tape;
    bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
    return t.emit(a.value().cwiseQuotient(b.value()), rg,
                  [ia = a.id, ib = b.id, io = (int)t.size()](Tape& tp) {
                      const Mat& g = tp.grad_of(io);
                      tp.accumulate(ia, g.cwiseQuotient(tp.val(ib)));
                      tp.accumulate(ib, -(g.cwiseProduct(tp.val(io))).cwiseQuotient(tp.val(ib)));
                  });
}

inline Var add_scalar(Var a, double c) {
    Tape& t = *a.tape;
    Mat v = (a.value().array() + c).matrix();
    return t.emit(std::move(v), t.requires_grad(a.id),
                  [ia = a.id, io = (int)t.size()](Tape& tp) {
                      tp.accumulate(ia, tp.grad_of(io));
                  });
}

inline Var mul_scalar(Var a, double c) {
    Tape& t = *a.tape;
    return t.emit(a.value() * c, t.requires_grad(a.id),
                  [ia = a.id, c, io = (int)t.size()](Tape& tp) {
                      tp.accumulate(ia, c * tp.grad_of(io));
                  });
}

inline Var matmul(Var a, Var b) {
    if (a.value().cols() != b.value().rows())
        throw std::invalid_argument("matmul: inner dimension mismatch");
    Tape& t = *a.tape;
    bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
    return t.emit(a.value() * b.value(), rg,
                  [ia = a.id, ib = b.id, io = (int)t.size()](Tape& tp) {
                      const Mat& g = tp.grad_of(io);
                      tp.accumulate(ia, g * tp.val(ib).transpose());
                      tp.accumulate(ib, tp.val(ia).transpose() * g);
                  });
}

// A (n x k) + row r (1 x k), broadcast down the rows.
inline Var add_rowvec(Var a, Var r) {
    if (r.value().rows() != 1 || r.value().cols() != a.value().cols())
        throw std::invalid_argument("add_rowvec: row vector shape mismatch");
    Tape& t = *a.tape;
    bool rg = t.requires_grad(a.id) || t.requires_grad(r.id);
    Mat v = a.value();
    v.rowwise() += r.value().row(0);
    return t.emit(std::move(v), rg, [ia = a.id, ir = r.id, io = (int)t.size()](Tape& tp) {
        const Mat& g = tp.grad_of(io);
        tp.accumulate(ia, g);
        tp.accumulate(ir, g.colwise().sum());
    });
}

// A (n x k) .* row r (1 x k), broadcast down the rows.
inline Var mul_rowvec(Var a, Var r) {
    if (r.value().rows() != 1 || r.value().cols() != a.value().cols())
        throw std::invalid_argument("mul_rowvec: row vector shape mismatch");
    Tape& t = *a.tape;
    bool rg = t.requires_grad(a.id) || t.requires_grad(r.id);
    Mat v = (a.value().array().rowwise() * r.value().row(0).array()).matrix();
    return t.emit(std::move(v), rg, [ia = a.id, ir = r.id, io = (int)t.size()](Tape& tp) {
        const Mat& g = tp.grad_of(io);
        tp.accumulate(ia, (g.array().rowwise() * tp.val(ir).row(0).array()).matrix());
        tp.accumulate(ir, (g.cwiseProduct(tp.val(ia))).colwise().sum());
    });
}

// A (n x k) .* constant column c (n x 1), broadcast across the columns.
inline Var mul_colvec_const(Var a, const Eigen::VectorXd& c) {
    if (c.size() != a.value().rows())
        throw std::invalid_argument("mul_colvec_const: column length mismatch");
    Tape& t = *a.tape;
    Mat v = (a.value().array().colwise() * c.array()).matrix();
    return t.emit(std::move(v), t.requires_grad(a.id),
                  [ia = a.id, c, io = (int)t.size()](Tape& tp) {
                      tp.accumulate(ia,
                                    (tp.grad_of(io).array().colwise() * c.array()).matrix());
                  });
}

inline Var relu(Var a) {
    Tape& t = *a.tape;
    return t.emit(a.value().cwiseMax(0.0), t.requires_grad(a.id),
                  [ia = a.id, io = (int)t.size()](Tape& tp) {
                      Mat mask = (tp.val(ia).array() > 0.0).cast<double>().matrix();
                      tp.accumulate(ia, tp.grad_of(io).cwiseProduct(mask));
                  });
}

namespace detail {
inline double sigmoid_scalar(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}
}  // namespace detail

inline Var sigmoid(Var a) {
    Tape& t = *a.tape;
    Mat v = a.value().unaryExpr([](double x) { return detail::sigmoid_scalar(x); });
    return t.emit(std::move(v), t.requires_grad(a.id),
                  [ia = a.id, io = (int)t.size()](Tape& tp) {
                      const Mat& s = tp.val(io);
                      Mat one_minus = Mat::Ones(s.rows(), s.cols()) - s;
                      tp.accumulate(ia, tp.grad_of(io).cwiseProduct(s.cwiseProduct(one_minus)));
                  });
}

inline Var softplus(Var a) {
    Tape& t = *a.tape;
    Mat v = a.value().unaryExpr([](double x) {
        return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    });
    return t.emit(std::move(v), t.requires_grad(a.id),
                  [ia = a.id, io = (int)t.size()](Tape& tp) {
                      Mat s = tp.val(ia).unaryExpr(
                          [](double x) { return detail::sigmoid_scalar(x); });
                      tp.accumulate(ia, tp.grad_of(io).cwiseProduct(s));
                  });
}

inline Var log(Var a) {
    Tape& t = *a.tape;
    Mat v = a.value().array().log().matrix();
    return t.emit(std::move(v), t.requires_grad(a.id),
                  [ia = a.id, io = (int)t.size()](Tape& tp) {
                      tp.accumulate(ia, tp.grad_of(io).cwiseQuotient(tp.val(ia)));
                  });
}

inline Var sqrt(Var a) {
    Tape& t = *a.tape;
    return t.emit(a.value().cwiseSqrt(), t.requires_grad(a.id),
                  [ia = a.id, io = (int)t.size()](Tape& tp) {
                      tp.accumulate(ia, (0.5 * tp.grad_of(io).array() /
                                         tp.val(io).array()).matrix());
                  });
}

inline Var square(Var a) {
    Tape& t = *a.tape;
    return t.emit(a.value().cwiseProduct(a.value()), t.requires_grad(a.id),
                  [ia = a.id, io = (int)t.size()](Tape& tp) {
                      tp.accumulate(ia, 2.0 * tp.grad_of(io).cwiseProduct(tp.val(ia)));
                  });
}

inline Var reciprocal(Var a) {
    Tape& t = *a.tape;
    return t.emit(a.value().cwiseInverse(), t.requires_grad(a.id),
                  [ia = a.id, io = (int)t.size()](Tape& tp) {
                      const Mat& v = tp.val(io);
                      tp.accumulate(ia, -tp.grad_of(io).cwiseProduct(v.cwiseProduct(v)));
                  });
}

// Gradient passes only strictly inside the interval.
inline Var clamp(Var a, double lo, double hi) {
    Tape& t = *a.tape;
    return t.emit(a.value().cwiseMax(lo).cwiseMin(hi), t.requires_grad(a.id),
                  [ia = a.id, lo, hi, io = (int)t.size()](Tape& tp) {
                      Mat mask = (tp.val(ia).array() > lo && tp.val(ia).array() < hi)
                                     .cast<double>()
                                     .matrix();
                      tp.accumulate(ia, tp.grad_of(io).cwiseProduct(mask));
                  });
}

inline Var clamp_min(Var a, double lo) {
    Tape& t = *a.tape;
    return t.emit(a.value().cwiseMax(lo), t.requires_grad(a.id),
                  [ia = a.id, lo, io = (int)t.size()](Tape& tp) {
                      Mat mask = (tp.val(ia).array() > lo).cast<double>().matrix();
                      tp.accumulate(ia, tp.grad_of(io).cwiseProduct(mask));
                  });
}

inline Var concat_cols(Var a, Var b) {
    if (a.value().rows() != b.value().rows())
        throw std::invalid_argument("concat_cols: row count mismatch");
    Tape& t = *a.tape;
    bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
    Mat v(a.value().rows(), a.value().cols() + b.value().cols());
    v << a.value(), b.value();
    const Eigen::Index na = a.value().cols();
    return t.emit(std::move(v), rg, [ia = a.id, ib = b.id, na, io = (int)t.size()](Tape& tp) {
        const Mat& g = tp.grad_of(io);
        tp.accumulate(ia, g.leftCols(na));
        tp.accumulate(ib, g.rightCols(g.cols() - na));
    });
}

// Row-wise sum over columns: (n x k) -> (n x 1).
inline Var sum_cols(Var a) {
    Tape& t = *a.tape;
    const Eigen::Index k = a.value().cols();
    return t.emit(a.value().rowwise().sum(), t.requires_grad(a.id),
                  [ia = a.id, k, io = (int)t.size()](Tape& tp) {
                      tp.accumulate(ia, tp.grad_of(io) * Mat::Ones(1, k));
                  });
}

inline Var mean_all(Var a) {
    Tape& t = *a.tape;
    const double inv_n = 1.0 / static_cast<double>(a.value().size());
    Mat v(1, 1);
    v(0, 0) = a.value().mean();
    const Eigen::Index r = a.value().rows(), c = a.value().cols();
    return t.emit(std::move(v), t.requires_grad(a.id),
                  [ia = a.id, inv_n, r, c, io = (int)t.size()](Tape& tp) {
                      tp.accumulate(ia, tp.grad_of(io)(0, 0) * inv_n * Mat::Ones(r, c));
                  });
}

struct BatchNormOut {
    Var y;
    Eigen::RowVectorXd batch_mean;
    Eigen::RowVectorXd batch_var;  // biased
};

// Train-mode batch normalization. Normalizes each column by its batch
// statistics; the backward pass accounts for the coupling through the
// batch mean and variance. Needs at least two rows.
inline BatchNormOut batchnorm_train(Var x, Var gamma, Var beta, double eps) {
    Tape& t = *x.tape;
    const Mat& xv = x.value();
    const Eigen::Index n = xv.rows();
    if (n < 2)
        throw NumericError("batch normalization in train mode needs a batch of size >= 2");
    if (gamma.value().cols() != xv.cols() || beta.value().cols() != xv.cols())
        throw std::invalid_argument("batchnorm_train: scale/shift width mismatch");

    Eigen::RowVectorXd mean = xv.colwise().mean();
    Mat centered = xv.rowwise() - mean;
    Eigen::RowVectorXd var =
        centered.cwiseProduct(centered).colwise().sum() / static_cast<double>(n);
    Eigen::RowVectorXd inv_std = (var.array() + eps).rsqrt().matrix();
    Mat xhat = (centered.array().rowwise() * inv_std.array()).matrix();
    Mat y = ((xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() +
             beta.value().row(0).array())
                .matrix();

    bool rg = t.requires_grad(x.id) || t.requires_grad(gamma.id) || t.requires_grad(beta.id);
    Var out = t.emit(
        std::move(y), rg,
        [ix = x.id, ig = gamma.id, ib = beta.id, xhat, centered, inv_std, n,
         io = (int)t.size()](Tape& tp) {
            const Mat& g = tp.grad_of(io);
            const double inv_n = 1.0 / static_cast<double>(n);
            tp.accumulate(ib, g.colwise().sum());
            tp.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());

            Mat dxhat = (g.array().rowwise() * tp.val(ig).row(0).array()).matrix();
            Eigen::RowVectorXd inv_std3 =
                (inv_std.array() * inv_std.array() * inv_std.array()).matrix();
            Eigen::RowVectorXd dvar =
                (dxhat.cwiseProduct(centered).colwise().sum().array() * (-0.5) *
                 inv_std3.array())
                    .matrix();
            // sum of centered columns is ~0; the term is kept for exactness
            Eigen::RowVectorXd dmean =
                ((dxhat.colwise().sum().array() * (-inv_std.array())) +
                 dvar.array() * (-2.0 * inv_n) * centered.colwise().sum().array())
                    .matrix();
            Mat dx = ((dxhat.array().rowwise() * inv_std.array()) +
                      (centered.array().rowwise() * (2.0 * inv_n * dvar.array())))
                         .matrix();
            dx.array().rowwise() += inv_n * dmean.array();
            tp.accumulate(ix, dx);
        });
    return {out, mean, var};
}

}  // namespace progmod::ad
