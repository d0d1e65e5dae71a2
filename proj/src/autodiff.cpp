// Copyright (c) 2026 The motionfill Authors
// SPDX-License-Identifier: Apache-2.0

#include "motionfill/autodiff.hpp"

#include <cmath>
#include <utility>

namespace motionfill::ad {

namespace {

constexpr double kBandNegInf = -1e30;

double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x / M_SQRT2)); }

double gelu_grad_scalar(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x / M_SQRT2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return cdf + x * pdf;
}

// Rotates feature pairs (2i, 2i+1) of every row by angle pos * base^(-2i/d).
void rope_rotate(Mat& x, const std::vector<int>& pos, double base, bool inverse) {
    const int d = static_cast<int>(x.cols());
    for (int i = 0; i * 2 + 1 < d; ++i) {
        const double theta = std::pow(base, -2.0 * i / d);
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            const double ang = (inverse ? -1.0 : 1.0) * pos[r] * theta;
            const double c = std::cos(ang), s = std::sin(ang);
            const double a = x(r, 2 * i), b = x(r, 2 * i + 1);
            x(r, 2 * i) = c * a - s * b;
            x(r, 2 * i + 1) = s * a + c * b;
        }
    }
}

// Scaled-dot attention with optional rotary positions and banding. Returns the
// output and stores the post-softmax weights for the backward pass.
Mat attn_forward(const Mat& q, const Mat& k, const Mat& v, const std::vector<int>* pos,
                 int window, double base, Mat* saved_weights) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    Mat qr = q, kr = k;
    if (pos) {
        rope_rotate(qr, *pos, base, false);
        rope_rotate(kr, *pos, base, false);
    }
    Mat s = qr * kr.transpose() * scale;
    if (pos && window > 0) {
        for (Eigen::Index i = 0; i < s.rows(); ++i) {
            for (Eigen::Index j = 0; j < s.cols(); ++j) {
                if (2 * std::abs((*pos)[i] - (*pos)[j]) > window) s(i, j) = kBandNegInf;
            }
        }
    }
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        const double m = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - m).exp();
        s.row(i) /= s.row(i).sum();
    }
    if (saved_weights) *saved_weights = s;
    return s * v;
}

void attn_backward(const Mat& g_out, const Mat& q, const Mat& k, const Mat& v,
                   const Mat& weights, const std::vector<int>* pos, double base,
                   Mat& gq, Mat& gk, Mat& gv) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    Mat qr = q, kr = k;
    if (pos) {
        rope_rotate(qr, *pos, base, false);
        rope_rotate(kr, *pos, base, false);
    }
    gv += weights.transpose() * g_out;
    Mat ga = g_out * v.transpose();
    Mat gs(weights.rows(), weights.cols());
    for (Eigen::Index i = 0; i < weights.rows(); ++i) {
        const double dot = ga.row(i).dot(weights.row(i));
        gs.row(i) = weights.row(i).cwiseProduct((ga.row(i).array() - dot).matrix());
    }
    Mat gqr = gs * kr * scale;
    Mat gkr = gs.transpose() * qr * scale;
    if (pos) {
        rope_rotate(gqr, *pos, base, true);
        rope_rotate(gkr, *pos, base, true);
    }
    gq += gqr;
    gk += gkr;
}

}  // namespace

Tape::Tape(const ParamStore* params, bool grad_enabled) : params_(params), grad_(grad_enabled) {
    if (params_) param_leaf_.assign(params_->size(), -1);
    nodes_.reserve(256);
}

const Mat& Tape::val(Var v) const { return nodes_.at(v.id).value; }

Mat& Tape::grad_of(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
}

Var Tape::emplace(Mat value, bool needs_grad, std::function<void(Tape&, const Node&)> back) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = grad_ && needs_grad;
    if (n.needs_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Mat m) { return emplace(std::move(m), false, nullptr); }

Var Tape::param(int param_index) {
    if (!params_) throw Error("tape: no parameter store attached");
    if (param_leaf_[param_index] >= 0) return Var{param_leaf_[param_index]};
    Var v = emplace(params_->values[param_index], true, nullptr);
    nodes_[v.id].param_index = param_index;
    param_leaf_[param_index] = v.id;
    return v;
}

Var Tape::add(Var a, Var b) {
    const bool ng = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
    return emplace(nodes_[a.id].value + nodes_[b.id].value, ng,
                   [a, b](Tape& t, const Node& self) {
                       if (t.nodes_[a.id].needs_grad) t.grad_of(a.id) += self.grad;
                       if (t.nodes_[b.id].needs_grad) t.grad_of(b.id) += self.grad;
                   });
}

Var Tape::sub(Var a, Var b) {
    const bool ng = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
    return emplace(nodes_[a.id].value - nodes_[b.id].value, ng,
                   [a, b](Tape& t, const Node& self) {
                       if (t.nodes_[a.id].needs_grad) t.grad_of(a.id) += self.grad;
                       if (t.nodes_[b.id].needs_grad) t.grad_of(b.id) -= self.grad;
                   });
}

Var Tape::mul(Var a, Var b) {
    const bool ng = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
    return emplace(nodes_[a.id].value.cwiseProduct(nodes_[b.id].value), ng,
                   [a, b](Tape& t, const Node& self) {
                       if (t.nodes_[a.id].needs_grad)
                           t.grad_of(a.id) += self.grad.cwiseProduct(t.nodes_[b.id].value);
                       if (t.nodes_[b.id].needs_grad)
                           t.grad_of(b.id) += self.grad.cwiseProduct(t.nodes_[a.id].value);
                   });
}

Var Tape::scale(Var a, double s) {
    return emplace(nodes_[a.id].value * s, nodes_[a.id].needs_grad,
                   [a, s](Tape& t, const Node& self) { t.grad_of(a.id) += self.grad * s; });
}

Var Tape::add_scalar(Var a, double s) {
    return emplace(nodes_[a.id].value.array() + s, nodes_[a.id].needs_grad,
                   [a](Tape& t, const Node& self) { t.grad_of(a.id) += self.grad; });
}

Var Tape::matmul(Var a, Var b) {
    const bool ng = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
    return emplace(nodes_[a.id].value * nodes_[b.id].value, ng,
                   [a, b](Tape& t, const Node& self) {
                       if (t.nodes_[a.id].needs_grad)
                           t.grad_of(a.id) += self.grad * t.nodes_[b.id].value.transpose();
                       if (t.nodes_[b.id].needs_grad)
                           t.grad_of(b.id) += t.nodes_[a.id].value.transpose() * self.grad;
                   });
}

Var Tape::add_rowvec(Var a, Var row) {
    const bool ng = nodes_[a.id].needs_grad || nodes_[row.id].needs_grad;
    Mat out = nodes_[a.id].value;
    out.rowwise() += nodes_[row.id].value.row(0);
    return emplace(std::move(out), ng, [a, row](Tape& t, const Node& self) {
        if (t.nodes_[a.id].needs_grad) t.grad_of(a.id) += self.grad;
        if (t.nodes_[row.id].needs_grad) t.grad_of(row.id).row(0) += self.grad.colwise().sum();
    });
}

Var Tape::mul_colvec(Var a, Var col) {
    const bool ng = nodes_[a.id].needs_grad || nodes_[col.id].needs_grad;
    Mat out = nodes_[a.id].value;
    out.array().colwise() *= nodes_[col.id].value.col(0).array();
    return emplace(std::move(out), ng, [a, col](Tape& t, const Node& self) {
        if (t.nodes_[a.id].needs_grad) {
            Mat g = self.grad;
            g.array().colwise() *= t.nodes_[col.id].value.col(0).array();
            t.grad_of(a.id) += g;
        }
        if (t.nodes_[col.id].needs_grad) {
            t.grad_of(col.id).col(0) +=
                self.grad.cwiseProduct(t.nodes_[a.id].value).rowwise().sum();
        }
    });
}

Var Tape::slice_rows(Var a, int start, int n) {
    return emplace(nodes_[a.id].value.middleRows(start, n), nodes_[a.id].needs_grad,
                   [a, start, n](Tape& t, const Node& self) {
                       t.grad_of(a.id).middleRows(start, n) += self.grad;
                   });
}

Var Tape::slice_cols(Var a, int start, int n) {
    return emplace(nodes_[a.id].value.middleCols(start, n), nodes_[a.id].needs_grad,
                   [a, start, n](Tape& t, const Node& self) {
                       t.grad_of(a.id).middleCols(start, n) += self.grad;
                   });
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
    Eigen::Index rows = 0;
    bool ng = false;
    for (Var p : parts) {
        rows += nodes_[p.id].value.rows();
        ng = ng || nodes_[p.id].needs_grad;
    }
    Mat out(rows, nodes_[parts.front().id].value.cols());
    Eigen::Index at = 0;
    for (Var p : parts) {
        out.middleRows(at, nodes_[p.id].value.rows()) = nodes_[p.id].value;
        at += nodes_[p.id].value.rows();
    }
    auto ps = parts;
    return emplace(std::move(out), ng, [ps](Tape& t, const Node& self) {
        Eigen::Index at = 0;
        for (Var p : ps) {
            const Eigen::Index n = t.nodes_[p.id].value.rows();
            if (t.nodes_[p.id].needs_grad) t.grad_of(p.id) += self.grad.middleRows(at, n);
            at += n;
        }
    });
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
    Eigen::Index cols = 0;
    bool ng = false;
    for (Var p : parts) {
        cols += nodes_[p.id].value.cols();
        ng = ng || nodes_[p.id].needs_grad;
    }
    Mat out(nodes_[parts.front().id].value.rows(), cols);
    Eigen::Index at = 0;
    for (Var p : parts) {
        out.middleCols(at, nodes_[p.id].value.cols()) = nodes_[p.id].value;
        at += nodes_[p.id].value.cols();
    }
    auto ps = parts;
    return emplace(std::move(out), ng, [ps](Tape& t, const Node& self) {
        Eigen::Index at = 0;
        for (Var p : ps) {
            const Eigen::Index n = t.nodes_[p.id].value.cols();
            if (t.nodes_[p.id].needs_grad) t.grad_of(p.id) += self.grad.middleCols(at, n);
            at += n;
        }
    });
}

Var Tape::take_rows(Var a, std::vector<int> rows) {
    Mat out(static_cast<Eigen::Index>(rows.size()), nodes_[a.id].value.cols());
    for (size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = nodes_[a.id].value.row(rows[i]);
    return emplace(std::move(out), nodes_[a.id].needs_grad,
                   [a, rows = std::move(rows)](Tape& t, const Node& self) {
                       Mat& g = t.grad_of(a.id);
                       for (size_t i = 0; i < rows.size(); ++i)
                           g.row(rows[i]) += self.grad.row(static_cast<Eigen::Index>(i));
                   });
}

Var Tape::reshape_to_points(Var a) {
    const Eigen::Index F = nodes_[a.id].value.rows();
    const Eigen::Index n = nodes_[a.id].value.cols() / 3;
    Mat out(F * n, 3);
    for (Eigen::Index f = 0; f < F; ++f)
        for (Eigen::Index i = 0; i < n; ++i)
            out.row(f * n + i) = nodes_[a.id].value.row(f).segment(3 * i, 3);
    return emplace(std::move(out), nodes_[a.id].needs_grad, [a, F, n](Tape& t, const Node& self) {
        Mat& g = t.grad_of(a.id);
        for (Eigen::Index f = 0; f < F; ++f)
            for (Eigen::Index i = 0; i < n; ++i)
                g.row(f).segment(3 * i, 3) += self.grad.row(f * n + i);
    });
}

Var Tape::reshape_from_points(Var a, int F) {
    const Eigen::Index n = nodes_[a.id].value.rows() / F;
    Mat out(F, n * 3);
    for (Eigen::Index f = 0; f < F; ++f)
        for (Eigen::Index i = 0; i < n; ++i)
            out.row(f).segment(3 * i, 3) = nodes_[a.id].value.row(f * n + i);
    return emplace(std::move(out), nodes_[a.id].needs_grad, [a, F, n](Tape& t, const Node& self) {
        Mat& g = t.grad_of(a.id);
        for (Eigen::Index f = 0; f < F; ++f)
            for (Eigen::Index i = 0; i < n; ++i)
                g.row(f * n + i) += self.grad.row(f).segment(3 * i, 3);
    });
}

Var Tape::gelu(Var a) {
    Mat out = nodes_[a.id].value.unaryExpr([](double x) { return gelu_scalar(x); });
    return emplace(std::move(out), nodes_[a.id].needs_grad, [a](Tape& t, const Node& self) {
        t.grad_of(a.id) += self.grad.cwiseProduct(
            t.nodes_[a.id].value.unaryExpr([](double x) { return gelu_grad_scalar(x); }));
    });
}

Var Tape::relu(Var a) {
    return emplace(nodes_[a.id].value.cwiseMax(0.0), nodes_[a.id].needs_grad,
                   [a](Tape& t, const Node& self) {
                       t.grad_of(a.id) += self.grad.cwiseProduct(
                           t.nodes_[a.id].value.unaryExpr([](double x) { return x > 0.0 ? 1.0 : 0.0; }));
                   });
}

Var Tape::tanh_elem(Var a) {
    Mat out = nodes_[a.id].value.array().tanh();
    return emplace(std::move(out), nodes_[a.id].needs_grad, [a](Tape& t, const Node& self) {
        t.grad_of(a.id) += self.grad.cwiseProduct((1.0 - self.value.array().square()).matrix());
    });
}

Var Tape::softplus(Var a) {
    Mat out = nodes_[a.id].value.unaryExpr([](double x) {
        return x > 30.0 ? x : std::log1p(std::exp(x));
    });
    return emplace(std::move(out), nodes_[a.id].needs_grad, [a](Tape& t, const Node& self) {
        t.grad_of(a.id) += self.grad.cwiseProduct(
            t.nodes_[a.id].value.unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); }));
    });
}

Var Tape::abs_elem(Var a) {
    return emplace(nodes_[a.id].value.cwiseAbs(), nodes_[a.id].needs_grad,
                   [a](Tape& t, const Node& self) {
                       t.grad_of(a.id) += self.grad.cwiseProduct(
                           t.nodes_[a.id].value.unaryExpr([](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }));
                   });
}

Var Tape::pow_elem(Var a, double p) {
    Mat out = nodes_[a.id].value.array().pow(p);
    return emplace(std::move(out), nodes_[a.id].needs_grad, [a, p](Tape& t, const Node& self) {
        t.grad_of(a.id) += self.grad.cwiseProduct(
            (p * t.nodes_[a.id].value.array().pow(p - 1.0)).matrix());
    });
}

Var Tape::sum(Var a) {
    Mat out(1, 1);
    out(0, 0) = nodes_[a.id].value.sum();
    return emplace(std::move(out), nodes_[a.id].needs_grad, [a](Tape& t, const Node& self) {
        t.grad_of(a.id).array() += self.grad(0, 0);
    });
}

Var Tape::mean_all(Var a) {
    const double n = static_cast<double>(nodes_[a.id].value.size());
    Mat out(1, 1);
    out(0, 0) = nodes_[a.id].value.sum() / n;
    return emplace(std::move(out), nodes_[a.id].needs_grad, [a, n](Tape& t, const Node& self) {
        t.grad_of(a.id).array() += self.grad(0, 0) / n;
    });
}

Var Tape::sumsq(Var a) {
    Mat out(1, 1);
    out(0, 0) = nodes_[a.id].value.squaredNorm();
    return emplace(std::move(out), nodes_[a.id].needs_grad, [a](Tape& t, const Node& self) {
        t.grad_of(a.id) += 2.0 * self.grad(0, 0) * t.nodes_[a.id].value;
    });
}

Var Tape::sum_abs(Var a) {
    Mat out(1, 1);
    out(0, 0) = nodes_[a.id].value.cwiseAbs().sum();
    return emplace(std::move(out), nodes_[a.id].needs_grad, [a](Tape& t, const Node& self) {
        t.grad_of(a.id) += self.grad(0, 0) *
            t.nodes_[a.id].value.unaryExpr([](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
    });
}

Var Tape::rows_dot(Var a, Var b) {
    const bool ng = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
    Mat out = nodes_[a.id].value.cwiseProduct(nodes_[b.id].value).rowwise().sum();
    return emplace(std::move(out), ng, [a, b](Tape& t, const Node& self) {
        if (t.nodes_[a.id].needs_grad) {
            Mat g = t.nodes_[b.id].value;
            g.array().colwise() *= self.grad.col(0).array();
            t.grad_of(a.id) += g;
        }
        if (t.nodes_[b.id].needs_grad) {
            Mat g = t.nodes_[a.id].value;
            g.array().colwise() *= self.grad.col(0).array();
            t.grad_of(b.id) += g;
        }
    });
}

Var Tape::rows_norm(Var a, double eps) {
    Mat out = (nodes_[a.id].value.rowwise().squaredNorm().array() + eps).sqrt();
    return emplace(std::move(out), nodes_[a.id].needs_grad, [a](Tape& t, const Node& self) {
        Mat g = t.nodes_[a.id].value;
        for (Eigen::Index i = 0; i < g.rows(); ++i) {
            const double n = self.value(i, 0);
            g.row(i) *= n > 0.0 ? self.grad(i, 0) / n : 0.0;
        }
        t.grad_of(a.id) += g;
    });
}

Var Tape::weighted_sum(Var a, const Eigen::VectorXd& w) {
    Mat out(1, 1);
    out(0, 0) = nodes_[a.id].value.col(0).dot(w);
    return emplace(std::move(out), nodes_[a.id].needs_grad, [a, w](Tape& t, const Node& self) {
        t.grad_of(a.id).col(0) += self.grad(0, 0) * w;
    });
}

Var Tape::gather_rows(Var table, std::vector<int> ids) {
    Mat out(static_cast<Eigen::Index>(ids.size()), nodes_[table.id].value.cols());
    for (size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = nodes_[table.id].value.row(ids[i]);
    return emplace(std::move(out), nodes_[table.id].needs_grad,
                   [table, ids = std::move(ids)](Tape& t, const Node& self) {
                       Mat& g = t.grad_of(table.id);
                       for (size_t i = 0; i < ids.size(); ++i)
                           g.row(ids[i]) += self.grad.row(static_cast<Eigen::Index>(i));
                   });
}

Var Tape::layernorm_rows(Var x, Var gamma, Var beta, double eps) {
    const Mat& xv = nodes_[x.id].value;
    const Eigen::Index C = xv.cols();
    Mat xhat(xv.rows(), C);
    Eigen::VectorXd inv_std(xv.rows());
    for (Eigen::Index i = 0; i < xv.rows(); ++i) {
        const double mu = xv.row(i).mean();
        const double var = (xv.row(i).array() - mu).square().sum() / C;
        inv_std(i) = 1.0 / std::sqrt(var + eps);
        xhat.row(i) = (xv.row(i).array() - mu) * inv_std(i);
    }
    Mat out = xhat;
    out.array().rowwise() *= nodes_[gamma.id].value.row(0).array();
    out.rowwise() += nodes_[beta.id].value.row(0);
    const bool ng = nodes_[x.id].needs_grad || nodes_[gamma.id].needs_grad || nodes_[beta.id].needs_grad;
    auto xh = std::make_shared<Mat>(std::move(xhat));
    auto istd = std::make_shared<Eigen::VectorXd>(std::move(inv_std));
    return emplace(std::move(out), ng, [x, gamma, beta, xh, istd, C](Tape& t, const Node& self) {
        if (t.nodes_[beta.id].needs_grad) t.grad_of(beta.id).row(0) += self.grad.colwise().sum();
        if (t.nodes_[gamma.id].needs_grad)
            t.grad_of(gamma.id).row(0) += self.grad.cwiseProduct(*xh).colwise().sum();
        if (t.nodes_[x.id].needs_grad) {
            Mat gxh = self.grad;
            gxh.array().rowwise() *= t.nodes_[gamma.id].value.row(0).array();
            Mat& gx = t.grad_of(x.id);
            for (Eigen::Index i = 0; i < gxh.rows(); ++i) {
                const double mean_g = gxh.row(i).mean();
                const double mean_gx = gxh.row(i).cwiseProduct(xh->row(i)).mean();
                gx.row(i) += ((gxh.row(i).array() - mean_g - xh->row(i).array() * mean_gx) * (*istd)(i)).matrix();
            }
            (void)C;
        }
    });
}

Var Tape::softmax_rows(Var x) {
    Mat out = nodes_[x.id].value;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        const double m = out.row(i).maxCoeff();
        out.row(i) = (out.row(i).array() - m).exp();
        out.row(i) /= out.row(i).sum();
    }
    return emplace(std::move(out), nodes_[x.id].needs_grad, [x](Tape& t, const Node& self) {
        Mat& gx = t.grad_of(x.id);
        for (Eigen::Index i = 0; i < self.value.rows(); ++i) {
            const double dot = self.grad.row(i).dot(self.value.row(i));
            gx.row(i) += self.value.row(i).cwiseProduct((self.grad.row(i).array() - dot).matrix());
        }
    });
}

Var Tape::cross_entropy(Var logits, std::vector<int> targets, Eigen::VectorXd row_weights) {
    const Mat& lv = nodes_[logits.id].value;
    if (static_cast<Eigen::Index>(targets.size()) != lv.rows() || row_weights.size() != lv.rows()) {
        throw ShapeMismatch("cross_entropy: targets/weights must match logit rows");
    }
    const double wsum = row_weights.sum();
    Mat out(1, 1);
    out(0, 0) = 0.0;
    if (wsum > 0.0) {
        double acc = 0.0;
        for (Eigen::Index i = 0; i < lv.rows(); ++i) {
            if (row_weights(i) == 0.0) continue;
            const double m = lv.row(i).maxCoeff();
            const double lse = m + std::log((lv.row(i).array() - m).exp().sum());
            acc += row_weights(i) * (lse - lv(i, targets[i]));
        }
        out(0, 0) = acc / wsum;
    }
    return emplace(std::move(out), nodes_[logits.id].needs_grad && wsum > 0.0,
                   [logits, targets = std::move(targets), row_weights = std::move(row_weights), wsum](
                       Tape& t, const Node& self) {
                       const Mat& lv = t.nodes_[logits.id].value;
                       Mat& g = t.grad_of(logits.id);
                       for (Eigen::Index i = 0; i < lv.rows(); ++i) {
                           if (row_weights(i) == 0.0) continue;
                           const double m = lv.row(i).maxCoeff();
                           Eigen::RowVectorXd p = (lv.row(i).array() - m).exp();
                           p /= p.sum();
                           p(targets[i]) -= 1.0;
                           g.row(i) += self.grad(0, 0) * (row_weights(i) / wsum) * p;
                       }
                   });
}

Var Tape::rope_attention(Var q, Var k, Var v, std::vector<int> positions, int window, double rope_base) {
    auto weights = std::make_shared<Mat>();
    auto pos = std::make_shared<std::vector<int>>(std::move(positions));
    Mat out = attn_forward(nodes_[q.id].value, nodes_[k.id].value, nodes_[v.id].value,
                           pos.get(), window, rope_base, weights.get());
    const bool ng = nodes_[q.id].needs_grad || nodes_[k.id].needs_grad || nodes_[v.id].needs_grad;
    return emplace(std::move(out), ng, [q, k, v, pos, weights, rope_base](Tape& t, const Node& self) {
        Mat gq = Mat::Zero(t.nodes_[q.id].value.rows(), t.nodes_[q.id].value.cols());
        Mat gk = gq, gv = gq;
        attn_backward(self.grad, t.nodes_[q.id].value, t.nodes_[k.id].value, t.nodes_[v.id].value,
                      *weights, pos.get(), rope_base, gq, gk, gv);
        if (t.nodes_[q.id].needs_grad) t.grad_of(q.id) += gq;
        if (t.nodes_[k.id].needs_grad) t.grad_of(k.id) += gk;
        if (t.nodes_[v.id].needs_grad) t.grad_of(v.id) += gv;
    });
}

// Shared machinery for the two fused multi-head layers. Blocks are either the
// R rows inside each frame (spatial) or the F frames of each row (temporal).
Var Tape::spatial_attention(Var x, Var wq, Var wk, Var wv, Var wo, int F, int R, int heads) {
    const Mat& xv = nodes_[x.id].value;
    const int D = static_cast<int>(xv.cols());
    const int dh = D / heads;
    Mat Q = xv * nodes_[wq.id].value;
    Mat K = xv * nodes_[wk.id].value;
    Mat V = xv * nodes_[wv.id].value;
    auto saved = std::make_shared<std::vector<Mat>>();
    saved->reserve(static_cast<size_t>(F) * heads);
    Mat O(xv.rows(), D);
    for (int f = 0; f < F; ++f) {
        for (int h = 0; h < heads; ++h) {
            Mat w;
            O.block(f * R, h * dh, R, dh) = attn_forward(
                Q.block(f * R, h * dh, R, dh), K.block(f * R, h * dh, R, dh),
                V.block(f * R, h * dh, R, dh), nullptr, 0, 0.0, &w);
            saved->push_back(std::move(w));
        }
    }
    Mat out = O * nodes_[wo.id].value;
    auto Qs = std::make_shared<Mat>(std::move(Q));
    auto Ks = std::make_shared<Mat>(std::move(K));
    auto Vs = std::make_shared<Mat>(std::move(V));
    auto Os = std::make_shared<Mat>(std::move(O));
    const bool ng = nodes_[x.id].needs_grad || nodes_[wq.id].needs_grad || nodes_[wk.id].needs_grad ||
                    nodes_[wv.id].needs_grad || nodes_[wo.id].needs_grad;
    return emplace(std::move(out), ng,
                   [x, wq, wk, wv, wo, F, R, heads, dh, Qs, Ks, Vs, Os, saved](Tape& t, const Node& self) {
                       const Mat& xv = t.nodes_[x.id].value;
                       Mat gO = self.grad * t.nodes_[wo.id].value.transpose();
                       if (t.nodes_[wo.id].needs_grad) t.grad_of(wo.id) += Os->transpose() * self.grad;
                       Mat gQ = Mat::Zero(xv.rows(), Qs->cols());
                       Mat gK = Mat::Zero(xv.rows(), Qs->cols());
                       Mat gV = Mat::Zero(xv.rows(), Qs->cols());
                       for (int f = 0; f < F; ++f) {
                           for (int h = 0; h < heads; ++h) {
                               Mat gq = Mat::Zero(R, dh), gk = Mat::Zero(R, dh), gv = Mat::Zero(R, dh);
                               attn_backward(gO.block(f * R, h * dh, R, dh),
                                             Qs->block(f * R, h * dh, R, dh),
                                             Ks->block(f * R, h * dh, R, dh),
                                             Vs->block(f * R, h * dh, R, dh),
                                             (*saved)[static_cast<size_t>(f) * heads + h], nullptr, 0.0,
                                             gq, gk, gv);
                               gQ.block(f * R, h * dh, R, dh) = gq;
                               gK.block(f * R, h * dh, R, dh) = gk;
                               gV.block(f * R, h * dh, R, dh) = gv;
                           }
                       }
                       if (t.nodes_[wq.id].needs_grad) t.grad_of(wq.id) += xv.transpose() * gQ;
                       if (t.nodes_[wk.id].needs_grad) t.grad_of(wk.id) += xv.transpose() * gK;
                       if (t.nodes_[wv.id].needs_grad) t.grad_of(wv.id) += xv.transpose() * gV;
                       if (t.nodes_[x.id].needs_grad)
                           t.grad_of(x.id) += gQ * t.nodes_[wq.id].value.transpose() +
                                              gK * t.nodes_[wk.id].value.transpose() +
                                              gV * t.nodes_[wv.id].value.transpose();
                   });
}

Var Tape::temporal_attention(Var x, Var wq, Var wk, Var wv, Var wo, int F, int R, int heads,
                             std::vector<int> positions, int window, double rope_base) {
    const Mat& xv = nodes_[x.id].value;
    const int D = static_cast<int>(xv.cols());
    const int dh = D / heads;
    Mat Q = xv * nodes_[wq.id].value;
    Mat K = xv * nodes_[wk.id].value;
    Mat V = xv * nodes_[wv.id].value;
    auto pos = std::make_shared<std::vector<int>>(std::move(positions));
    auto saved = std::make_shared<std::vector<Mat>>();
    saved->reserve(static_cast<size_t>(R) * heads);
    Mat O(xv.rows(), D);
    // Row r of every frame forms one temporal block of F entries.
    auto block_of = [&](const Mat& m, int r, int h) {
        Mat b(F, dh);
        for (int f = 0; f < F; ++f) b.row(f) = m.row(f * R + r).segment(h * dh, dh);
        return b;
    };
    for (int r = 0; r < R; ++r) {
        for (int h = 0; h < heads; ++h) {
            Mat w;
            Mat ob = attn_forward(block_of(Q, r, h), block_of(K, r, h), block_of(V, r, h),
                                  pos.get(), window, rope_base, &w);
            for (int f = 0; f < F; ++f) O.row(f * R + r).segment(h * dh, dh) = ob.row(f);
            saved->push_back(std::move(w));
        }
    }
    Mat out = O * nodes_[wo.id].value;
    auto Qs = std::make_shared<Mat>(std::move(Q));
    auto Ks = std::make_shared<Mat>(std::move(K));
    auto Vs = std::make_shared<Mat>(std::move(V));
    auto Os = std::make_shared<Mat>(std::move(O));
    const bool ng = nodes_[x.id].needs_grad || nodes_[wq.id].needs_grad || nodes_[wk.id].needs_grad ||
                    nodes_[wv.id].needs_grad || nodes_[wo.id].needs_grad;
    return emplace(
        std::move(out), ng,
        [x, wq, wk, wv, wo, F, R, heads, dh, Qs, Ks, Vs, Os, saved, pos, rope_base](Tape& t, const Node& self) {
            const Mat& xv = t.nodes_[x.id].value;
            Mat gO = self.grad * t.nodes_[wo.id].value.transpose();
            if (t.nodes_[wo.id].needs_grad) t.grad_of(wo.id) += Os->transpose() * self.grad;
            Mat gQ = Mat::Zero(xv.rows(), Qs->cols());
            Mat gK = Mat::Zero(xv.rows(), Qs->cols());
            Mat gV = Mat::Zero(xv.rows(), Qs->cols());
            auto block_of = [&](const Mat& m, int r, int h) {
                Mat b(F, dh);
                for (int f = 0; f < F; ++f) b.row(f) = m.row(f * R + r).segment(h * dh, dh);
                return b;
            };
            for (int r = 0; r < R; ++r) {
                for (int h = 0; h < heads; ++h) {
                    Mat gq = Mat::Zero(F, dh), gk = Mat::Zero(F, dh), gv = Mat::Zero(F, dh);
                    attn_backward(block_of(gO, r, h), block_of(*Qs, r, h), block_of(*Ks, r, h),
                                  block_of(*Vs, r, h), (*saved)[static_cast<size_t>(r) * heads + h],
                                  pos.get(), rope_base, gq, gk, gv);
                    for (int f = 0; f < F; ++f) {
                        gQ.row(f * R + r).segment(h * dh, dh) += gq.row(f);
                        gK.row(f * R + r).segment(h * dh, dh) += gk.row(f);
                        gV.row(f * R + r).segment(h * dh, dh) += gv.row(f);
                    }
                }
            }
            if (t.nodes_[wq.id].needs_grad) t.grad_of(wq.id) += xv.transpose() * gQ;
            if (t.nodes_[wk.id].needs_grad) t.grad_of(wk.id) += xv.transpose() * gK;
            if (t.nodes_[wv.id].needs_grad) t.grad_of(wv.id) += xv.transpose() * gV;
            if (t.nodes_[x.id].needs_grad)
                t.grad_of(x.id) += gQ * t.nodes_[wq.id].value.transpose() +
                                   gK * t.nodes_[wk.id].value.transpose() +
                                   gV * t.nodes_[wv.id].value.transpose();
        });
}

Var Tape::rot6d_rows_to_matrices(Var x6) {
    const Mat& xv = nodes_[x6.id].value;
    const Eigen::Index N = xv.rows();
    Mat out(N, 9);
    for (Eigen::Index i = 0; i < N; ++i) {
        const Vec3 a1 = xv.row(i).segment<3>(0).transpose();
        const Vec3 a2 = xv.row(i).segment<3>(3).transpose();
        const Vec3 b1 = a1.normalized();
        const Vec3 u2 = a2 - b1.dot(a2) * b1;
        const Vec3 b2 = u2.normalized();
        out.row(i).segment<3>(0) = b1.transpose();
        out.row(i).segment<3>(3) = b2.transpose();
        out.row(i).segment<3>(6) = b1.cross(b2).transpose();
    }
    return emplace(std::move(out), nodes_[x6.id].needs_grad, [x6](Tape& t, const Node& self) {
        const Mat& xv = t.nodes_[x6.id].value;
        Mat& gx = t.grad_of(x6.id);
        for (Eigen::Index i = 0; i < xv.rows(); ++i) {
            const Vec3 a1 = xv.row(i).segment<3>(0).transpose();
            const Vec3 a2 = xv.row(i).segment<3>(3).transpose();
            const double n1 = a1.norm();
            const Vec3 b1 = a1 / n1;
            const double d = b1.dot(a2);
            const Vec3 u2 = a2 - d * b1;
            const double n2 = u2.norm();
            const Vec3 b2 = u2 / n2;
            const Vec3 g1 = self.grad.row(i).segment<3>(0).transpose();
            const Vec3 g2 = self.grad.row(i).segment<3>(3).transpose();
            const Vec3 g3 = self.grad.row(i).segment<3>(6).transpose();
            // b3 = b1 x b2.
            Vec3 gb1 = g1 + b2.cross(g3);
            Vec3 gb2 = g2 + g3.cross(b1);
            // b2 = u2 / |u2|.
            const Vec3 gu2 = (gb2 - gb2.dot(b2) * b2) / n2;
            // u2 = a2 - (b1 . a2) b1.
            Vec3 ga2 = gu2 - gu2.dot(b1) * b1;
            gb1 += -gu2.dot(b1) * a2 - d * gu2;
            // b1 = a1 / |a1|.
            const Vec3 ga1 = (gb1 - gb1.dot(b1) * b1) / n1;
            gx.row(i).segment<3>(0) += ga1.transpose();
            gx.row(i).segment<3>(3) += ga2.transpose();
        }
    });
}

Var Tape::integrate_canonical(Var rot_rows, Var deltas, const Mat3& anchor_rot, const Vec3& anchor_trans) {
    const Mat& qv = nodes_[rot_rows.id].value;
    const Mat& dv = nodes_[deltas.id].value;
    const Eigen::Index N = qv.rows();
    if (dv.rows() != N) throw ShapeMismatch("integrate_canonical: rotations and deltas disagree");
    Mat out(N + 1, 12);
    Mat3 R = anchor_rot;
    Vec3 tr = anchor_trans;
    out.row(0).segment<9>(0) = mat3_to_row(R).transpose();
    out.row(0).segment<3>(9) = tr.transpose();
    for (Eigen::Index i = 0; i < N; ++i) {
        tr += R * dv.row(i).transpose();
        R = R * row_to_mat3(qv.row(i).transpose());
        out.row(i + 1).segment<9>(0) = mat3_to_row(R).transpose();
        out.row(i + 1).segment<3>(9) = tr.transpose();
    }
    const bool ng = nodes_[rot_rows.id].needs_grad || nodes_[deltas.id].needs_grad;
    return emplace(std::move(out), ng, [rot_rows, deltas, N](Tape& t, const Node& self) {
        const Mat& qv = t.nodes_[rot_rows.id].value;
        const Mat& dv = t.nodes_[deltas.id].value;
        Mat gq = Mat::Zero(N, 9);
        Mat gd = Mat::Zero(N, 3);
        // Running gradients w.r.t. the state after step i.
        Mat3 GR = row_to_mat3(self.grad.row(N).segment<9>(0).transpose());
        Vec3 Gt = self.grad.row(N).segment<3>(9).transpose();
        for (Eigen::Index i = N - 1; i >= 0; --i) {
            const Mat3 Rprev = row_to_mat3(self.value.row(i).segment<9>(0).transpose());
            const Mat3 Qi = row_to_mat3(qv.row(i).transpose());
            const Vec3 di = dv.row(i).transpose();
            gq.row(i) = mat3_to_row(Rprev.transpose() * GR).transpose();
            gd.row(i) = (Rprev.transpose() * Gt).transpose();
            Mat3 GRprev = GR * Qi.transpose() + Gt * di.transpose();
            GRprev += row_to_mat3(self.grad.row(i).segment<9>(0).transpose());
            Gt += self.grad.row(i).segment<3>(9).transpose();
            GR = GRprev;
        }
        if (t.nodes_[rot_rows.id].needs_grad) t.grad_of(rot_rows.id) += gq;
        if (t.nodes_[deltas.id].needs_grad) t.grad_of(deltas.id) += gd;
    });
}

Var Tape::apply_rigid(Var rot_rows, Var trans, Var pts) {
    const Mat& Rv = nodes_[rot_rows.id].value;
    const Mat& tv = nodes_[trans.id].value;
    const Mat& pv = nodes_[pts.id].value;
    const Eigen::Index F = Rv.rows();
    const Eigen::Index n = pv.rows() / F;
    Mat out(pv.rows(), 3);
    for (Eigen::Index f = 0; f < F; ++f) {
        const Mat3 R = row_to_mat3(Rv.row(f).transpose());
        out.middleRows(f * n, n) = pv.middleRows(f * n, n) * R.transpose();
        out.middleRows(f * n, n).rowwise() += tv.row(f);
    }
    const bool ng = nodes_[rot_rows.id].needs_grad || nodes_[trans.id].needs_grad || nodes_[pts.id].needs_grad;
    return emplace(std::move(out), ng, [rot_rows, trans, pts, F, n](Tape& t, const Node& self) {
        const Mat& Rv = t.nodes_[rot_rows.id].value;
        const Mat& pv = t.nodes_[pts.id].value;
        for (Eigen::Index f = 0; f < F; ++f) {
            const Mat3 R = row_to_mat3(Rv.row(f).transpose());
            const auto g = self.grad.middleRows(f * n, n);
            if (t.nodes_[pts.id].needs_grad) t.grad_of(pts.id).middleRows(f * n, n) += g * R;
            if (t.nodes_[rot_rows.id].needs_grad) {
                const Mat3 gR = g.transpose() * pv.middleRows(f * n, n);
                t.grad_of(rot_rows.id).row(f) += mat3_to_row(gR).transpose();
            }
            if (t.nodes_[trans.id].needs_grad) t.grad_of(trans.id).row(f) += g.colwise().sum();
        }
    });
}

Var Tape::blocked_matmul(const Mat& w, Var pts, int F) {
    const Mat& pv = nodes_[pts.id].value;
    const Eigen::Index b = pv.rows() / F;
    if (w.cols() != b) throw ShapeMismatch("blocked_matmul: weight columns mismatch block rows");
    Mat out(static_cast<Eigen::Index>(F) * w.rows(), 3);
    for (int f = 0; f < F; ++f) out.middleRows(f * w.rows(), w.rows()) = w * pv.middleRows(f * b, b);
    return emplace(std::move(out), nodes_[pts.id].needs_grad, [pts, w, F, b](Tape& t, const Node& self) {
        Mat& g = t.grad_of(pts.id);
        for (int f = 0; f < F; ++f)
            g.middleRows(f * b, b) += w.transpose() * self.grad.middleRows(f * w.rows(), w.rows());
    });
}

Var Tape::project_rows(Var pts, double focal, const Vec2& pp) {
    const Mat& pv = nodes_[pts.id].value;
    Mat out(pv.rows(), 2);
    // Depth clamps at 5 cm so gradients stay bounded during training.
    const double zmin = 0.05;
    for (Eigen::Index i = 0; i < pv.rows(); ++i) {
        const double z = std::max(pv(i, 2), zmin);
        out(i, 0) = focal * pv(i, 0) / z + pp.x();
        out(i, 1) = focal * pv(i, 1) / z + pp.y();
    }
    return emplace(std::move(out), nodes_[pts.id].needs_grad, [pts, focal, zmin](Tape& t, const Node& self) {
        const Mat& pv = t.nodes_[pts.id].value;
        Mat& g = t.grad_of(pts.id);
        for (Eigen::Index i = 0; i < pv.rows(); ++i) {
            const bool clamped = pv(i, 2) < zmin;
            const double z = clamped ? zmin : pv(i, 2);
            g(i, 0) += self.grad(i, 0) * focal / z;
            g(i, 1) += self.grad(i, 1) * focal / z;
            if (!clamped) {
                g(i, 2) += -(self.grad(i, 0) * focal * pv(i, 0) + self.grad(i, 1) * focal * pv(i, 1)) / (z * z);
            }
        }
    });
}

Var Tape::straight_through(Var z, Mat q) {
    if (q.rows() != nodes_[z.id].value.rows() || q.cols() != nodes_[z.id].value.cols()) {
        throw ShapeMismatch("straight_through: shapes disagree");
    }
    return emplace(std::move(q), nodes_[z.id].needs_grad,
                   [z](Tape& t, const Node& self) { t.grad_of(z.id) += self.grad; });
}

void Tape::backward(Var loss, std::vector<Mat>& param_grads) {
    if (!grad_) throw Error("tape: backward on a no-grad tape");
    Node& top = nodes_.at(loss.id);
    if (top.value.rows() != 1 || top.value.cols() != 1) {
        throw ShapeMismatch("backward: loss must be 1 x 1");
    }
    grad_of(loss.id)(0, 0) += 1.0;
    for (int id = loss.id; id >= 0; --id) {
        Node& n = nodes_[id];
        if (!n.needs_grad || n.grad.size() == 0) continue;
        if (n.back) n.back(*this, n);
        if (n.param_index >= 0) param_grads[n.param_index] += n.grad;
    }
}

double global_grad_norm(const std::vector<Mat>& grads) {
    double acc = 0.0;
    for (const auto& g : grads) acc += g.squaredNorm();
    return std::sqrt(acc);
}

void clip_grads(std::vector<Mat>& grads, double max_norm) {
    const double n = global_grad_norm(grads);
    if (n > max_norm && n > 0.0) {
        const double s = max_norm / n;
        for (auto& g : grads) g *= s;
    }
}

}  // namespace motionfill::ad
