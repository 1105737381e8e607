#include "nsc/autodiff.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

#include "nsc/linalg.hpp"
#include "nsc/strfmt.hpp"

namespace nsc::ad {

using linalg::dot;

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
constexpr double kLnEps = 1e-5;  // layer-norm variance floor
}  // namespace

Tape::Var Tape::push(Matrix value, bool requires_grad, std::function<void(Tape&)> back) {
    Node n;
    n.grad = Matrix(value.rows, value.cols);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
}

Tape::Var Tape::leaf(Matrix value, bool requires_grad) {
    return push(std::move(value), requires_grad, {});
}

Tape::Var Tape::scalar_leaf(double value, bool requires_grad) {
    Matrix m(1, 1);
    m.data[0] = value;
    return push(std::move(m), requires_grad, {});
}

Tape::Var Tape::matmul(Var a, Var b) {
    Matrix out = linalg::matmul(value(a), value(b));
    bool rg = needs(a) || needs(b);
    Var self = push(std::move(out), rg, {});
    if (rg) {
        nodes_[self].back = [a, b, self](Tape& t) {
            const Matrix& go = t.grad(self);
            if (t.needs(a)) {
                Matrix da = linalg::matmul_nt(go, t.value(b));  // dC * B^T
                linalg::axpy(t.grad_ref(a), 1.0, da);
            }
            if (t.needs(b)) {
                Matrix db = linalg::matmul_tn(t.value(a), go);  // A^T * dC
                linalg::axpy(t.grad_ref(b), 1.0, db);
            }
        };
    }
    return self;
}

Tape::Var Tape::matmul_nt(Var a, Var b) {
    Matrix out = linalg::matmul_nt(value(a), value(b));
    bool rg = needs(a) || needs(b);
    Var self = push(std::move(out), rg, {});
    if (rg) {
        nodes_[self].back = [a, b, self](Tape& t) {
            const Matrix& go = t.grad(self);  // dC, C = A * B^T
            if (t.needs(a)) {
                Matrix da = linalg::matmul(go, t.value(b));  // dC * B
                linalg::axpy(t.grad_ref(a), 1.0, da);
            }
            if (t.needs(b)) {
                Matrix db = linalg::matmul_tn(go, t.value(a));  // dC^T * A
                linalg::axpy(t.grad_ref(b), 1.0, db);
            }
        };
    }
    return self;
}

Tape::Var Tape::add(Var a, Var b) {
    Matrix out = linalg::add(value(a), value(b));
    bool rg = needs(a) || needs(b);
    Var self = push(std::move(out), rg, {});
    if (rg) {
        nodes_[self].back = [a, b, self](Tape& t) {
            if (t.needs(a)) linalg::axpy(t.grad_ref(a), 1.0, t.grad(self));
            if (t.needs(b)) linalg::axpy(t.grad_ref(b), 1.0, t.grad(self));
        };
    }
    return self;
}

Tape::Var Tape::scale_const(Var a, double c) {
    Matrix out = linalg::scale(value(a), c);
    bool rg = needs(a);
    Var self = push(std::move(out), rg, {});
    if (rg) {
        nodes_[self].back = [a, c, self](Tape& t) {
            linalg::axpy(t.grad_ref(a), c, t.grad(self));
        };
    }
    return self;
}

Tape::Var Tape::add_scaled(Var base, Var scalar, Matrix direction) {
    if (value(scalar).size() != 1) throw std::invalid_argument("add_scaled: scalar var expected");
    Matrix out = value(base);
    double s = value(scalar).data[0];
    if (s != 0.0) linalg::axpy(out, s, direction);  // exact no-op stays bit-exact
    bool rg = needs(base) || needs(scalar);
    auto dir = std::make_shared<Matrix>(std::move(direction));
    Var self = push(std::move(out), rg, {});
    if (rg) {
        nodes_[self].back = [base, scalar, dir, self](Tape& t) {
            if (t.needs(base)) linalg::axpy(t.grad_ref(base), 1.0, t.grad(self));
            if (t.needs(scalar)) {
                double acc = dot(t.grad(self).data, dir->data);
                t.grad_ref(scalar).data[0] += acc;
            }
        };
    }
    return self;
}

Tape::Var Tape::add_row_const(Var a, Matrix row) {
    const Matrix& x = value(a);
    if (row.rows != 1 || row.cols != x.cols)
        throw std::invalid_argument("add_row_const: row shape mismatch");
    Matrix out = x;
    for (std::size_t i = 0; i < out.rows; ++i)
        for (std::size_t j = 0; j < out.cols; ++j) out.at(i, j) += row.at(0, j);
    bool rg = needs(a);
    Var self = push(std::move(out), rg, {});
    if (rg) {
        nodes_[self].back = [a, self](Tape& t) {
            linalg::axpy(t.grad_ref(a), 1.0, t.grad(self));
        };
    }
    return self;
}

Tape::Var Tape::layer_norm(Var xv, Matrix gain, Matrix bias) {
    const Matrix& x = value(xv);
    const std::size_t n = x.rows, d = x.cols;
    if (gain.size() != d || bias.size() != d)
        throw std::invalid_argument("layer_norm: affine params must have d entries");

    Matrix out(n, d);
    auto xhat = std::make_shared<Matrix>(n, d);
    auto inv_std = std::make_shared<std::vector<double>>(n);
    for (std::size_t i = 0; i < n; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += x.at(i, j);
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            double c = x.at(i, j) - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        double is = 1.0 / std::sqrt(var + kLnEps);
        (*inv_std)[i] = is;
        for (std::size_t j = 0; j < d; ++j) {
            double h = (x.at(i, j) - mean) * is;
            xhat->at(i, j) = h;
            out.at(i, j) = gain.data[j] * h + bias.data[j];
        }
    }

    bool rg = needs(xv);
    auto g = std::make_shared<Matrix>(std::move(gain));
    Var self = push(std::move(out), rg, {});
    if (rg) {
        nodes_[self].back = [xv, xhat, inv_std, g, self, n, d](Tape& t) {
            Matrix& dx = t.grad_ref(xv);
            const Matrix& go = t.grad(self);
            for (std::size_t i = 0; i < n; ++i) {
                double sum_dg = 0.0, sum_dgx = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    double dg = go.at(i, j) * g->data[j];
                    sum_dg += dg;
                    sum_dgx += dg * xhat->at(i, j);
                }
                double inv_d = 1.0 / static_cast<double>(d);
                for (std::size_t j = 0; j < d; ++j) {
                    double dg = go.at(i, j) * g->data[j];
                    dx.at(i, j) += (*inv_std)[i] *
                                   (dg - inv_d * sum_dg - xhat->at(i, j) * inv_d * sum_dgx);
                }
            }
        };
    }
    return self;
}

Tape::Var Tape::gelu(Var xv) {
    const Matrix& x = value(xv);
    Matrix out(x.rows, x.cols);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        double v = x.data[i];
        out.data[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    }
    bool rg = needs(xv);
    Var self = push(std::move(out), rg, {});
    if (rg) {
        nodes_[self].back = [xv, self](Tape& t) {
            const Matrix& x2 = t.value(xv);
            Matrix& dx = t.grad_ref(xv);
            const Matrix& go = t.grad(self);
            for (std::size_t i = 0; i < x2.data.size(); ++i) {
                double v = x2.data[i];
                double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                dx.data[i] += go.data[i] * (cdf + v * pdf);
            }
        };
    }
    return self;
}

Tape::Var Tape::attention(Var qv, Var kv, Var vv, std::size_t batch, std::size_t seq,
                           std::size_t heads) {
    const Matrix& q = value(qv);
    const std::size_t d = q.cols;
    if (q.rows != batch * seq) throw std::invalid_argument("attention: row count != batch*seq");
    if (d % heads != 0) throw std::invalid_argument("attention: dim not divisible by heads");
    const std::size_t dh = d / heads;
    const double scl = 1.0 / std::sqrt(static_cast<double>(dh));

    const Matrix& k = value(kv);
    const Matrix& v = value(vv);
    Matrix out(batch * seq, d);
    // softmax weights saved per (sample, head) for the backward pass
    auto probs = std::make_shared<std::vector<Matrix>>();
    probs->reserve(batch * heads);

    for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t r0 = b * seq;
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t c0 = h * dh;
            Matrix p(seq, seq);
            for (std::size_t i = 0; i < seq; ++i) {
                double mx = -1e300;
                for (std::size_t j = 0; j < seq; ++j) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c)
                        s += q.at(r0 + i, c0 + c) * k.at(r0 + j, c0 + c);
                    s *= scl;
                    p.at(i, j) = s;
                    if (s > mx) mx = s;
                }
                double denom = 0.0;
                for (std::size_t j = 0; j < seq; ++j) {
                    double e = std::exp(p.at(i, j) - mx);
                    p.at(i, j) = e;
                    denom += e;
                }
                for (std::size_t j = 0; j < seq; ++j) p.at(i, j) /= denom;
            }
            for (std::size_t i = 0; i < seq; ++i)
                for (std::size_t c = 0; c < dh; ++c) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < seq; ++j)
                        acc += p.at(i, j) * v.at(r0 + j, c0 + c);
                    out.at(r0 + i, c0 + c) = acc;
                }
            probs->push_back(std::move(p));
        }
    }

    bool rg = needs(qv) || needs(kv) || needs(vv);
    Var self = push(std::move(out), rg, {});
    if (rg) {
        nodes_[self].back = [qv, kv, vv, probs, self, batch, seq, heads, dh, scl](Tape& t) {
            const Matrix& q2 = t.value(qv);
            const Matrix& k2 = t.value(kv);
            const Matrix& v2 = t.value(vv);
            const Matrix& go = t.grad(self);
            Matrix& dq = t.grad_ref(qv);
            Matrix& dk = t.grad_ref(kv);
            Matrix& dv = t.grad_ref(vv);
            for (std::size_t b = 0; b < batch; ++b) {
                const std::size_t r0 = b * seq;
                for (std::size_t h = 0; h < heads; ++h) {
                    const std::size_t c0 = h * dh;
                    const Matrix& p = (*probs)[b * heads + h];
                    // dV += P^T dY
                    for (std::size_t j = 0; j < seq; ++j)
                        for (std::size_t c = 0; c < dh; ++c) {
                            double acc = 0.0;
                            for (std::size_t i = 0; i < seq; ++i)
                                acc += p.at(i, j) * go.at(r0 + i, c0 + c);
                            dv.at(r0 + j, c0 + c) += acc;
                        }
                    // dP = dY V^T ; dS = P o (dP - rowsum(dP o P))
                    Matrix ds(seq, seq);
                    for (std::size_t i = 0; i < seq; ++i) {
                        double rowdot = 0.0;
                        for (std::size_t j = 0; j < seq; ++j) {
                            double dp = 0.0;
                            for (std::size_t c = 0; c < dh; ++c)
                                dp += go.at(r0 + i, c0 + c) * v2.at(r0 + j, c0 + c);
                            ds.at(i, j) = dp;
                            rowdot += dp * p.at(i, j);
                        }
                        for (std::size_t j = 0; j < seq; ++j)
                            ds.at(i, j) = p.at(i, j) * (ds.at(i, j) - rowdot);
                    }
                    // dQ += scl * dS K ; dK += scl * dS^T Q
                    for (std::size_t i = 0; i < seq; ++i)
                        for (std::size_t c = 0; c < dh; ++c) {
                            double accq = 0.0, acck = 0.0;
                            for (std::size_t j = 0; j < seq; ++j) {
                                accq += ds.at(i, j) * k2.at(r0 + j, c0 + c);
                                acck += ds.at(j, i) * q2.at(r0 + j, c0 + c);
                            }
                            dq.at(r0 + i, c0 + c) += scl * accq;
                            dk.at(r0 + i, c0 + c) += scl * acck;
                        }
                }
            }
        };
    }
    return self;
}

Tape::Var Tape::mean_pool(Var xv, std::size_t batch, std::size_t seq) {
    const Matrix& x = value(xv);
    if (x.rows != batch * seq) throw std::invalid_argument("mean_pool: row count != batch*seq");
    const std::size_t d = x.cols;
    Matrix out(batch, d);
    const double inv = 1.0 / static_cast<double>(seq);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < seq; ++t)
            for (std::size_t j = 0; j < d; ++j) out.at(b, j) += inv * x.at(b * seq + t, j);
    bool rg = needs(xv);
    Var self = push(std::move(out), rg, {});
    if (rg) {
        nodes_[self].back = [xv, self, batch, seq, d, inv](Tape& t) {
            Matrix& dx = t.grad_ref(xv);
            const Matrix& go = t.grad(self);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t tt = 0; tt < seq; ++tt)
                    for (std::size_t j = 0; j < d; ++j)
                        dx.at(b * seq + tt, j) += inv * go.at(b, j);
        };
    }
    return self;
}

Tape::Var Tape::cross_entropy(Var logits_v, std::vector<int> labels) {
    const Matrix& logits = value(logits_v);
    const std::size_t n = logits.rows, c = logits.cols;
    if (labels.size() != n) throw std::invalid_argument("cross_entropy: label count mismatch");

    auto p = std::make_shared<Matrix>(n, c);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double mx = logits.at(i, 0);
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits.at(i, j));
        double denom = 0.0;
        for (std::size_t j = 0; j < c; ++j) denom += std::exp(logits.at(i, j) - mx);
        double lse = mx + std::log(denom);
        int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= c)
            throw std::invalid_argument(strfmt("cross_entropy: label %d out of range", y));
        loss += lse - logits.at(i, y);
        for (std::size_t j = 0; j < c; ++j) p->at(i, j) = std::exp(logits.at(i, j) - lse);
    }
    loss /= static_cast<double>(n);

    Matrix out(1, 1);
    out.data[0] = loss;
    bool rg = needs(logits_v);
    auto lab = std::make_shared<std::vector<int>>(std::move(labels));
    Var self = push(std::move(out), rg, {});
    if (rg) {
        nodes_[self].back = [logits_v, p, lab, self, n, c](Tape& t) {
            double go = t.grad(self).data[0] / static_cast<double>(n);
            Matrix& dx = t.grad_ref(logits_v);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < c; ++j) {
                    double onehot = (static_cast<std::size_t>((*lab)[i]) == j) ? 1.0 : 0.0;
                    dx.at(i, j) += go * (p->at(i, j) - onehot);
                }
        };
    }
    return self;
}

Tape::Var Tape::mse(Var pred_v, Matrix targets) {
    const Matrix& pred = value(pred_v);
    if (!pred.same_shape(targets)) throw std::invalid_argument("mse: shape mismatch");
    const double inv_n = 1.0 / static_cast<double>(pred.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        double dlt = pred.data[i] - targets.data[i];
        loss += dlt * dlt;
    }
    loss *= inv_n;
    Matrix out(1, 1);
    out.data[0] = loss;
    bool rg = needs(pred_v);
    auto tgt = std::make_shared<Matrix>(std::move(targets));
    Var self = push(std::move(out), rg, {});
    if (rg) {
        nodes_[self].back = [pred_v, tgt, self, inv_n](Tape& t) {
            double go = t.grad(self).data[0];
            const Matrix& p = t.value(pred_v);
            Matrix& dx = t.grad_ref(pred_v);
            for (std::size_t i = 0; i < p.data.size(); ++i)
                dx.data[i] += go * 2.0 * inv_n * (p.data[i] - tgt->data[i]);
        };
    }
    return self;
}

Tape::Var Tape::mean_entropy(Var logits_v) {
    const Matrix& logits = value(logits_v);
    const std::size_t n = logits.rows, c = logits.cols;
    // H_i = logsumexp(s) - sum_j p_j s_j, stable for saturated rows
    auto p = std::make_shared<Matrix>(n, c);
    auto sbar = std::make_shared<std::vector<double>>(n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double mx = logits.at(i, 0);
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits.at(i, j));
        double denom = 0.0;
        for (std::size_t j = 0; j < c; ++j) denom += std::exp(logits.at(i, j) - mx);
        double lse = mx + std::log(denom);
        double dotps = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            double pj = std::exp(logits.at(i, j) - lse);
            p->at(i, j) = pj;
            dotps += pj * logits.at(i, j);
        }
        (*sbar)[i] = dotps;
        total += lse - dotps;
    }
    total /= static_cast<double>(n);

    Matrix out(1, 1);
    out.data[0] = total;
    bool rg = needs(logits_v);
    Var self = push(std::move(out), rg, {});
    if (rg) {
        nodes_[self].back = [logits_v, p, sbar, self, n, c](Tape& t) {
            double go = t.grad(self).data[0] / static_cast<double>(n);
            const Matrix& s = t.value(logits_v);
            Matrix& dx = t.grad_ref(logits_v);
            // dH_i/ds_j = -p_j (s_j - sum_c p_c s_c)
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    dx.at(i, j) += go * (-p->at(i, j) * (s.at(i, j) - (*sbar)[i]));
        };
    }
    return self;
}

Tape::Var Tape::null_ratio_batch(Var zv, Matrix a, Matrix gram_inv) {
    const Matrix& z = value(zv);
    const std::size_t n = z.rows, d = z.cols, r = a.rows;
    if (a.cols != d) throw std::invalid_argument("null_ratio_batch: factor width mismatch");
    if (gram_inv.rows != r || gram_inv.cols != r)
        throw std::invalid_argument("null_ratio_batch: gram inverse must be r x r");

    auto fac = std::make_shared<Matrix>(std::move(a));
    auto ginv = std::make_shared<Matrix>(std::move(gram_inv));
    auto resid = std::make_shared<Matrix>(n, d);
    auto fnorm = std::make_shared<std::vector<double>>(n);
    auto znorm = std::make_shared<std::vector<double>>(n);

    auto project = [&](std::span<const double> x, double* out_row) {
        // out = A^T (G^-1 (A x))
        std::vector<double> y(r, 0.0), w(r, 0.0);
        for (std::size_t i = 0; i < r; ++i) y[i] = dot(fac->row(i), x);
        for (std::size_t i = 0; i < r; ++i) w[i] = dot(ginv->row(i), y);
        for (std::size_t j = 0; j < d; ++j) out_row[j] = 0.0;
        for (std::size_t i = 0; i < r; ++i) {
            const double wi = w[i];
            const double* arow = fac->data.data() + i * d;
            for (std::size_t j = 0; j < d; ++j) out_row[j] += wi * arow[j];
        }
    };

    Matrix out(n, 1);
    std::vector<double> proj(d);
    for (std::size_t i = 0; i < n; ++i) {
        auto zr = z.row(i);
        double g2 = dot(zr, zr);
        if (g2 == 0.0) {
            out.at(i, 0) = 1.0;  // zero feature: no row-space mass
            (*fnorm)[i] = 0.0;
            (*znorm)[i] = 0.0;
            continue;
        }
        project(zr, proj.data());
        double f2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            double rj = zr[j] - proj[j];
            resid->at(i, j) = rj;
            f2 += rj * rj;
        }
        (*fnorm)[i] = std::sqrt(f2);
        (*znorm)[i] = std::sqrt(g2);
        out.at(i, 0) = std::clamp((*fnorm)[i] / (*znorm)[i], 0.0, 1.0);
    }

    bool rg = needs(zv);
    Var self = push(std::move(out), rg, {});
    if (rg) {
        nodes_[self].back = [zv, fac, ginv, resid, fnorm, znorm, self, n, d, r](Tape& t) {
            const Matrix& z2 = t.value(zv);
            const Matrix& go = t.grad(self);
            Matrix& dz = t.grad_ref(zv);
            std::vector<double> y(r), w(r), pr(d);
            for (std::size_t i = 0; i < n; ++i) {
                double f = (*fnorm)[i], g = (*znorm)[i];
                double gout = go.at(i, 0);
                if (gout == 0.0 || g == 0.0 || f <= 1e-15 * g) continue;
                // d omega / dz = (r - A^T G^-1 A r) / (f g) - (f / g^3) z
                auto rrow = resid->row(i);
                for (std::size_t a2 = 0; a2 < r; ++a2) y[a2] = dot(fac->row(a2), rrow);
                for (std::size_t a2 = 0; a2 < r; ++a2) w[a2] = dot(ginv->row(a2), y);
                for (std::size_t j = 0; j < d; ++j) pr[j] = 0.0;
                for (std::size_t a2 = 0; a2 < r; ++a2) {
                    const double wa = w[a2];
                    const double* arow = fac->data.data() + a2 * d;
                    for (std::size_t j = 0; j < d; ++j) pr[j] += wa * arow[j];
                }
                double c1 = 1.0 / (f * g);
                double c2 = f / (g * g * g);
                for (std::size_t j = 0; j < d; ++j)
                    dz.at(i, j) += gout * ((rrow[j] - pr[j]) * c1 - c2 * z2.at(i, j));
            }
        };
    }
    return self;
}

Tape::Var Tape::mean_vector(Var v) {
    const Matrix& x = value(v);
    if (x.cols != 1) throw std::invalid_argument("mean_vector: expected a column");
    const std::size_t n = x.rows;
    Matrix out(1, 1);
    out.data[0] = linalg::pairwise_sum(x.data) / static_cast<double>(n);
    bool rg = needs(v);
    Var self = push(std::move(out), rg, {});
    if (rg) {
        nodes_[self].back = [v, self, n](Tape& t) {
            double go = t.grad(self).data[0] / static_cast<double>(n);
            Matrix& dx = t.grad_ref(v);
            for (auto& gv : dx.data) gv += go;
        };
    }
    return self;
}

Tape::Var Tape::combine(const std::vector<Var>& xs, const std::vector<double>& ws) {
    if (xs.size() != ws.size() || xs.empty())
        throw std::invalid_argument("combine: need equally many vars and weights");
    double acc = 0.0;
    bool rg = false;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (value(xs[i]).size() != 1) throw std::invalid_argument("combine: scalar vars expected");
        acc += ws[i] * scalar(xs[i]);
        rg = rg || needs(xs[i]);
    }
    Matrix out(1, 1);
    out.data[0] = acc;
    auto vars = std::make_shared<std::vector<Var>>(xs);
    auto weights = std::make_shared<std::vector<double>>(ws);
    Var self = push(std::move(out), rg, {});
    if (rg) {
        nodes_[self].back = [vars, weights, self](Tape& t) {
            double go = t.grad(self).data[0];
            for (std::size_t i = 0; i < vars->size(); ++i)
                if (t.needs((*vars)[i])) t.grad_ref((*vars)[i]).data[0] += go * (*weights)[i];
        };
    }
    return self;
}

void Tape::backward(Var out) {
    if (value(out).size() != 1) throw std::invalid_argument("backward: output must be scalar");
    for (auto& n : nodes_) std::fill(n.grad.data.begin(), n.grad.data.end(), 0.0);
    nodes_[out].grad.data[0] = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
        if (i > out) continue;  // nodes created after the output cannot feed it
        Node& n = nodes_[i];
        if (n.back && n.requires_grad) n.back(*this);
    }
}

}  // namespace nsc::ad
