#pragma once

// Small differentiable models with exact stacked outputs, Jacobians,
// per-example gradients and Hessian-vector products, plus the synthetic
// datasets the experiments run on.

#include "poprisk/dual.hpp"
#include "poprisk/numerics.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace poprisk {

enum class ModelKind { linear, mlp };
enum class Activation { tanh, relu };

struct Architecture {
    ModelKind kind = ModelKind::mlp;
    std::vector<int> widths;  // input, hidden..., output
    Activation activation = Activation::tanh;

    int input_dim() const { return widths.front(); }
    int output_dim() const { return widths.back(); }
    int num_layers() const { return static_cast<int>(widths.size()) - 1; }
    bool has_bias() const { return kind == ModelKind::mlp; }

    int layer_size(int l) const { return widths[l + 1] * widths[l] + (has_bias() ? widths[l + 1] : 0); }
    int layer_offset(int l) const {
        int off = 0;
        for (int k = 0; k < l; ++k) off += layer_size(k);
        return off;
    }
    int num_weights() const { return layer_offset(num_layers()); }

    void validate() const {
        require(widths.size() >= 2, "Architecture: need at least input and output widths");
        for (int w : widths) require(w >= 1, "Architecture: widths must be positive");
        require(kind == ModelKind::mlp || widths.size() == 2, "Architecture: linear model has no hidden layers");
    }
};

class Model {
public:
    Model(Architecture arch, Vector weights) : arch_(std::move(arch)), w_(std::move(weights)) {
        arch_.validate();
        require(w_.size() == arch_.num_weights(), "Model: weight count does not match architecture");
    }

    static Model linear(int input_dim, int output_dim, Vector weights) {
        return Model({ModelKind::linear, {input_dim, output_dim}, Activation::tanh}, std::move(weights));
    }
    static Model mlp(std::vector<int> widths, Activation act, Vector weights) {
        return Model({ModelKind::mlp, std::move(widths), act}, std::move(weights));
    }

    /// i.i.d. Gaussian initialization with std 1/sqrt(fan_in) for every entry.
    static Model init(const Architecture& arch, Rng& rng) {
        arch.validate();
        Vector w(arch.num_weights());
        int off = 0;
        for (int l = 0; l < arch.num_layers(); ++l) {
            const double sd = 1.0 / std::sqrt(static_cast<double>(arch.widths[l]));
            for (int k = 0; k < arch.layer_size(l); ++k) w(off + k) = sd * rng.normal();
            off += arch.layer_size(l);
        }
        return Model(arch, std::move(w));
    }

    const Architecture& arch() const { return arch_; }
    const Vector& weights() const { return w_; }
    Vector& weights() { return w_; }
    int num_weights() const { return static_cast<int>(w_.size()); }
    int input_dim() const { return arch_.input_dim(); }
    int output_dim() const { return arch_.output_dim(); }

    Model with_weights(Vector w) const { return Model(arch_, std::move(w)); }

private:
    Architecture arch_;
    Vector w_;
};

struct Dataset {
    Matrix inputs;                // n x input_dim
    Matrix targets;               // n x p
    std::optional<Matrix> noise;  // n x p, present when the generator planted label noise
    nlohmann::json meta = nlohmann::json::object();

    Eigen::Index size() const { return inputs.rows(); }
    Eigen::Index output_dim() const { return targets.cols(); }
    Eigen::Index input_dim() const { return inputs.cols(); }

    void validate() const {
        require(inputs.rows() >= 1, "Dataset: need n >= 1");
        require(targets.rows() == inputs.rows(), "Dataset: targets must have n rows");
        require(!noise || (noise->rows() == targets.rows() && noise->cols() == targets.cols()),
                "Dataset: noise record must match targets");
    }

    /// f*(S): targets with the recorded noise removed.
    Matrix clean_targets() const {
        require(noise.has_value(), "Dataset: no noise record");
        return targets - *noise;
    }

    Dataset subset(std::span<const std::size_t> idx) const {
        Dataset out;
        out.inputs.resize(static_cast<Eigen::Index>(idx.size()), inputs.cols());
        out.targets.resize(static_cast<Eigen::Index>(idx.size()), targets.cols());
        if (noise) out.noise = Matrix(static_cast<Eigen::Index>(idx.size()), targets.cols());
        for (std::size_t k = 0; k < idx.size(); ++k) {
            const auto i = static_cast<Eigen::Index>(idx[k]);
            out.inputs.row(k) = inputs.row(i);
            out.targets.row(k) = targets.row(i);
            if (noise) out.noise->row(k) = noise->row(i);
        }
        out.meta = meta;
        return out;
    }

    Dataset without(std::size_t i) const {
        std::vector<std::size_t> idx;
        for (std::size_t k = 0; k < static_cast<std::size_t>(size()); ++k)
            if (k != i) idx.push_back(k);
        return subset(idx);
    }
};

/// Rows of a matrix stacked into one vector (example-major, as U_S is laid out).
inline Vector stack_rows(const Matrix& m) {
    Vector v(m.size());
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index o = 0; o < m.cols(); ++o) v(i * m.cols() + o) = m(i, o);
    return v;
}

inline Matrix unstack_rows(const Vector& v, Eigen::Index p) {
    require(p > 0 && v.size() % p == 0, "unstack_rows: length not divisible by p");
    Matrix m(v.size() / p, p);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index o = 0; o < p; ++o) m(i, o) = v(i * p + o);
    return m;
}

// ---------------------------------------------------------------------------
// Per-example losses.

enum class LossKind { squared, softmax_ce };

struct Loss {
    LossKind kind = LossKind::squared;

    template <class S>
    S value(const S* u, const double* y, int p) const {
        if (kind == LossKind::squared) {
            S acc = 0.0;
            for (int o = 0; o < p; ++o) {
                const S r = u[o] - y[o];
                acc += r * r;
            }
            return S(0.5) * acc;
        }
        using std::exp;
        using std::log;
        double shift = value_of(u[0]);
        for (int o = 1; o < p; ++o) shift = std::max(shift, value_of(u[o]));
        S z = 0.0;
        for (int o = 0; o < p; ++o) z += exp(u[o] - S(shift));
        S out = log(z) + S(shift);
        for (int o = 0; o < p; ++o) out -= S(y[o]) * u[o];
        return out;
    }

    /// d loss / d u. Softmax cross-entropy assumes the target row sums to one.
    template <class S>
    void gradient(const S* u, const double* y, int p, S* out) const {
        if (kind == LossKind::squared) {
            for (int o = 0; o < p; ++o) out[o] = u[o] - S(y[o]);
            return;
        }
        using std::exp;
        double shift = value_of(u[0]);
        for (int o = 1; o < p; ++o) shift = std::max(shift, value_of(u[o]));
        S z = 0.0;
        for (int o = 0; o < p; ++o) {
            out[o] = exp(u[o] - S(shift));
            z += out[o];
        }
        for (int o = 0; o < p; ++o) out[o] = out[o] / z - S(y[o]);
    }

    Matrix hessian(const double* u, const double* y, int p) const {
        if (kind == LossKind::squared) return Matrix::Identity(p, p);
        std::vector<double> g(static_cast<std::size_t>(p));
        gradient(u, y, p, g.data());
        Vector s(p);
        for (int o = 0; o < p; ++o) s(o) = g[o] + y[o];
        Matrix h = -s * s.transpose();
        h.diagonal() += s;
        return h;
    }
};

inline double squared_loss(const Vector& u, const Vector& y) { return 0.5 * (u - y).squaredNorm(); }

// ---------------------------------------------------------------------------
// Per-example forward / reverse passes, templated on the scalar so the same
// code produces values (double) and Hessian-vector products (Dual).

namespace detail {

template <class S>
struct Tape {
    std::vector<std::vector<S>> pre;   // pre-activations per layer
    std::vector<std::vector<S>> post;  // post[0] = input, post[l+1] = layer l output
};

template <class S>
S activate(Activation act, const S& z) {
    if (act == Activation::tanh) {
        using std::tanh;
        return tanh(z);
    }
    return value_of(z) > 0.0 ? z : S(0.0);
}

template <class S>
S activate_deriv(Activation act, const S& z, const S& a) {
    if (act == Activation::tanh) return S(1.0) - a * a;
    return value_of(z) > 0.0 ? S(1.0) : S(0.0);
}

template <class S>
void forward_one(const Architecture& arch, const S* w, const double* x, Tape<S>& tape) {
    const int layers = arch.num_layers();
    tape.pre.resize(static_cast<std::size_t>(layers));
    tape.post.resize(static_cast<std::size_t>(layers) + 1);
    tape.post[0].assign(x, x + arch.widths[0]);
    int off = 0;
    for (int l = 0; l < layers; ++l) {
        const int in = arch.widths[l];
        const int out = arch.widths[l + 1];
        const auto& a = tape.post[l];
        auto& z = tape.pre[l];
        z.assign(static_cast<std::size_t>(out), S(0.0));
        for (int r = 0; r < out; ++r) {
            S acc = arch.has_bias() ? w[off + out * in + r] : S(0.0);
            const S* row = w + off + r * in;
            for (int c = 0; c < in; ++c) acc += row[c] * a[c];
            z[r] = acc;
        }
        auto& next = tape.post[l + 1];
        next.resize(static_cast<std::size_t>(out));
        const bool last = l + 1 == layers;
        for (int r = 0; r < out; ++r) next[r] = last ? z[r] : activate(arch.activation, z[r]);
        off += arch.layer_size(l);
    }
}

/// grad += J^T delta for the example recorded in `tape`.
template <class S>
void backward_one(const Architecture& arch, const S* w, const Tape<S>& tape, std::vector<S> delta, S* grad) {
    const int layers = arch.num_layers();
    for (int l = layers - 1; l >= 0; --l) {
        const int in = arch.widths[l];
        const int out = arch.widths[l + 1];
        const int off = arch.layer_offset(l);
        const auto& a = tape.post[l];
        for (int r = 0; r < out; ++r) {
            S* grow = grad + off + r * in;
            for (int c = 0; c < in; ++c) grow[c] += delta[r] * a[c];
            if (arch.has_bias()) grad[off + out * in + r] += delta[r];
        }
        if (l == 0) break;
        std::vector<S> prev(static_cast<std::size_t>(in), S(0.0));
        for (int r = 0; r < out; ++r) {
            const S* row = w + off + r * in;
            for (int c = 0; c < in; ++c) prev[c] += row[c] * delta[r];
        }
        for (int c = 0; c < in; ++c)
            prev[c] = prev[c] * activate_deriv(arch.activation, tape.pre[l - 1][c], tape.post[l][c]);
        delta = std::move(prev);
    }
}

inline std::vector<double> row_of(const Matrix& m, Eigen::Index i) {
    std::vector<double> r(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) r[c] = m(i, c);
    return r;
}

inline void check_compatible(const Model& model, const Dataset& data) {
    require(data.inputs.cols() == model.input_dim(), "model/data input dimension mismatch");
    require(data.targets.cols() == model.output_dim(), "model/data output dimension mismatch");
}

/// (1/n) sum_a c_a grad l_a in scalar S; w and the return are d-vectors.
template <class S>
std::vector<S> weighted_gradient(const Model& model, const Dataset& data, const Loss& loss, const std::vector<S>& w,
                                 const Vector* example_weights) {
    const auto& arch = model.arch();
    const int d = arch.num_weights();
    const int p = arch.output_dim();
    const auto n = data.size();
    std::vector<S> grad(static_cast<std::size_t>(d), S(0.0));
    Tape<S> tape;
    std::vector<S> r(static_cast<std::size_t>(p));
    for (Eigen::Index a = 0; a < n; ++a) {
        const auto x = row_of(data.inputs, a);
        const auto y = row_of(data.targets, a);
        forward_one(arch, w.data(), x.data(), tape);
        loss.gradient(tape.post.back().data(), y.data(), p, r.data());
        const double c = (example_weights ? (*example_weights)(a) : 1.0) / static_cast<double>(n);
        for (auto& v : r) v = v * S(c);
        backward_one(arch, w.data(), tape, r, grad.data());
    }
    return grad;
}

}  // namespace detail

/// F(w, x) for a single input.
inline Vector forward_one(const Model& model, const Vector& x) {
    require(x.size() == model.input_dim(), "forward_one: input dimension mismatch");
    detail::Tape<double> tape;
    std::vector<double> xs(x.data(), x.data() + x.size());
    detail::forward_one(model.arch(), model.weights().data(), xs.data(), tape);
    const auto& out = tape.post.back();
    return Eigen::Map<const Vector>(out.data(), static_cast<Eigen::Index>(out.size()));
}

/// Batched predictions, n x p.
inline Matrix predict(const Model& model, const Matrix& inputs) {
    require(inputs.cols() == model.input_dim(), "predict: input dimension mismatch");
    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const auto& arch = model.arch();
    Matrix a = inputs.transpose();
    int off = 0;
    for (int l = 0; l < arch.num_layers(); ++l) {
        const int in = arch.widths[l], out = arch.widths[l + 1];
        Eigen::Map<const RowMat> wl(model.weights().data() + off, out, in);
        Matrix z = wl * a;
        if (arch.has_bias()) z.colwise() += Eigen::Map<const Vector>(model.weights().data() + off + out * in, out);
        if (l + 1 < arch.num_layers()) {
            if (arch.activation == Activation::tanh) z = z.array().tanh().matrix();
            else z = z.array().max(0.0).matrix();
        }
        a = std::move(z);
        off += arch.layer_size(l);
    }
    return a.transpose();
}

/// U_S(w) = (F(w,z_1); ...; F(w,z_n)).
inline Vector forward_stacked(const Model& model, const Dataset& data) {
    detail::check_compatible(model, data);
    return stack_rows(predict(model, data.inputs));
}

/// J_S(w), np x d, assembled from one reverse pass per output coordinate.
inline Matrix jacobian_stacked(const Model& model, const Dataset& data) {
    detail::check_compatible(model, data);
    const auto& arch = model.arch();
    const int d = arch.num_weights(), p = arch.output_dim();
    const auto n = data.size();
    Matrix jac = Matrix::Zero(n * p, d);
    detail::Tape<double> tape;
    std::vector<double> row(static_cast<std::size_t>(d));
    for (Eigen::Index a = 0; a < n; ++a) {
        const auto x = detail::row_of(data.inputs, a);
        detail::forward_one(arch, model.weights().data(), x.data(), tape);
        for (int o = 0; o < p; ++o) {
            std::vector<double> delta(static_cast<std::size_t>(p), 0.0);
            delta[o] = 1.0;
            std::fill(row.begin(), row.end(), 0.0);
            detail::backward_one(arch, model.weights().data(), tape, delta, row.data());
            jac.row(a * p + o) = Eigen::Map<const Eigen::RowVectorXd>(row.data(), d);
        }
    }
    return jac;
}

/// Rows g_a = J_a^T grad_u l(F(w,z_a), y_a), n x d. Their mean is the
/// gradient of the mean loss.
inline Matrix per_example_gradients(const Model& model, const Dataset& data, const Loss& loss = {}) {
    detail::check_compatible(model, data);
    const auto& arch = model.arch();
    const int d = arch.num_weights(), p = arch.output_dim();
    const auto n = data.size();
    Matrix out(n, d);
    detail::Tape<double> tape;
    std::vector<double> grad(static_cast<std::size_t>(d));
    std::vector<double> r(static_cast<std::size_t>(p));
    for (Eigen::Index a = 0; a < n; ++a) {
        const auto x = detail::row_of(data.inputs, a);
        const auto y = detail::row_of(data.targets, a);
        detail::forward_one(arch, model.weights().data(), x.data(), tape);
        loss.gradient(tape.post.back().data(), y.data(), p, r.data());
        std::fill(grad.begin(), grad.end(), 0.0);
        detail::backward_one(arch, model.weights().data(), tape, r, grad.data());
        out.row(a) = Eigen::Map<const Eigen::RowVectorXd>(grad.data(), d);
    }
    return out;
}

/// Per-example losses l_a = phi(F(w,z_a); y_a).
inline Vector per_example_losses(const Model& model, const Dataset& data, const Loss& loss = {}) {
    detail::check_compatible(model, data);
    const Matrix u = predict(model, data.inputs);
    const int p = model.output_dim();
    Vector out(data.size());
    for (Eigen::Index a = 0; a < data.size(); ++a) {
        const auto ua = detail::row_of(u, a);
        const auto ya = detail::row_of(data.targets, a);
        out(a) = loss.value(ua.data(), ya.data(), p);
    }
    return out;
}

/// Phi_S = (1/n) sum_a c_a l_a.
inline double empirical_loss(const Model& model, const Dataset& data, const Loss& loss = {},
                             const Vector* example_weights = nullptr) {
    const Vector l = per_example_losses(model, data, loss);
    if (example_weights) return l.dot(*example_weights) / static_cast<double>(l.size());
    return l.mean();
}

struct LossGradient {
    double loss = 0.0;
    Vector gradient;
};

/// Mean loss and gradient over the rows in `idx` (all rows when empty), with
/// optional per-example weights c_a. Batched reverse pass in Eigen.
inline LossGradient mean_loss_gradient(const Model& model, const Dataset& data, const Loss& loss = {},
                                       std::span<const std::size_t> idx = {},
                                       const Vector* example_weights = nullptr) {
    detail::check_compatible(model, data);
    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const auto& arch = model.arch();
    const int layers = arch.num_layers();
    const int p = arch.output_dim();
    const Eigen::Index b = idx.empty() ? data.size() : static_cast<Eigen::Index>(idx.size());
    auto pick = [&](Eigen::Index k) { return idx.empty() ? k : static_cast<Eigen::Index>(idx[k]); };

    std::vector<Matrix> acts(static_cast<std::size_t>(layers) + 1);
    acts[0].resize(arch.input_dim(), b);
    for (Eigen::Index k = 0; k < b; ++k) acts[0].col(k) = data.inputs.row(pick(k)).transpose();
    std::vector<int> offs(static_cast<std::size_t>(layers));
    for (int l = 0, off = 0; l < layers; ++l) {
        offs[l] = off;
        const int in = arch.widths[l], out = arch.widths[l + 1];
        Eigen::Map<const RowMat> wl(model.weights().data() + off, out, in);
        Matrix z = wl * acts[l];
        if (arch.has_bias()) z.colwise() += Eigen::Map<const Vector>(model.weights().data() + off + out * in, out);
        if (l + 1 < layers) {
            if (arch.activation == Activation::tanh) z = z.array().tanh().matrix();
            else z = z.array().max(0.0).matrix();
        }
        acts[l + 1] = std::move(z);
        off += arch.layer_size(l);
    }

    LossGradient out{0.0, Vector::Zero(arch.num_weights())};
    Matrix delta(p, b);
    std::vector<double> ua(static_cast<std::size_t>(p)), ya(static_cast<std::size_t>(p)), ra(static_cast<std::size_t>(p));
    for (Eigen::Index k = 0; k < b; ++k) {
        const Eigen::Index a = pick(k);
        for (int o = 0; o < p; ++o) { ua[o] = acts[layers](o, k); ya[o] = data.targets(a, o); }
        const double c = (example_weights ? (*example_weights)(a) : 1.0) / static_cast<double>(b);
        out.loss += c * loss.value(ua.data(), ya.data(), p);
        loss.gradient(ua.data(), ya.data(), p, ra.data());
        for (int o = 0; o < p; ++o) delta(o, k) = c * ra[o];
    }
    for (int l = layers - 1; l >= 0; --l) {
        const int in = arch.widths[l], out_w = arch.widths[l + 1];
        Eigen::Map<RowMat> gw(out.gradient.data() + offs[l], out_w, in);
        gw.noalias() = delta * acts[l].transpose();
        if (arch.has_bias())
            Eigen::Map<Vector>(out.gradient.data() + offs[l] + out_w * in, out_w) = delta.rowwise().sum();
        if (l == 0) break;
        Eigen::Map<const RowMat> wl(model.weights().data() + offs[l], out_w, in);
        Matrix prev = wl.transpose() * delta;
        if (arch.activation == Activation::tanh)
            prev = (prev.array() * (1.0 - acts[l].array().square())).matrix();
        else
            prev = (prev.array() * (acts[l].array() > 0.0).cast<double>()).matrix();
        delta = std::move(prev);
    }
    return out;
}

/// Exact H v for H = Hessian of (1/n) sum_a c_a l_a, by forward-over-reverse.
inline Vector hessian_vector_product(const Model& model, const Dataset& data, const Loss& loss, const Vector& v,
                                     const Vector* example_weights = nullptr) {
    require(v.size() == model.num_weights(), "hessian_vector_product: direction size mismatch");
    std::vector<Dual> w(static_cast<std::size_t>(v.size()));
    for (Eigen::Index k = 0; k < v.size(); ++k) w[k] = Dual(model.weights()(k), v(k));
    const auto g = detail::weighted_gradient<Dual>(model, data, loss, w, example_weights);
    Vector out(v.size());
    for (Eigen::Index k = 0; k < v.size(); ++k) out(k) = g[k].d;
    return out;
}

inline constexpr int kDenseHessianCap = 256;

/// Dense exact Hessian of the (weighted) empirical loss; d <= 256.
inline Matrix loss_hessian(const Model& model, const Dataset& data, const Loss& loss,
                           const Vector* example_weights = nullptr) {
    const int d = model.num_weights();
    require(d <= kDenseHessianCap, "loss_hessian: d exceeds dense Hessian cap");
    Matrix h(d, d);
    for (int k = 0; k < d; ++k)
        h.col(k) = hessian_vector_product(model, data, loss, Vector::Unit(d, k), example_weights);
    return symmetrize(h);
}

/// g = grad_u Phi_S at stacked outputs u; Phi_S = (1/n) sum c_a l_a.
inline Vector output_gradient(const Vector& u, const Dataset& data, const Loss& loss,
                              const Vector* example_weights = nullptr) {
    const auto n = data.size();
    const auto p = data.output_dim();
    require(u.size() == n * p, "output_gradient: stacked output length mismatch");
    Vector g(u.size());
    std::vector<double> ya(static_cast<std::size_t>(p));
    for (Eigen::Index a = 0; a < n; ++a) {
        for (Eigen::Index o = 0; o < p; ++o) ya[o] = data.targets(a, o);
        loss.gradient(u.data() + a * p, ya.data(), static_cast<int>(p), g.data() + a * p);
        const double c = (example_weights ? (*example_weights)(a) : 1.0) / static_cast<double>(n);
        g.segment(a * p, p) *= c;
    }
    return g;
}

/// Phi_S evaluated directly on stacked outputs.
inline double output_loss(const Vector& u, const Dataset& data, const Loss& loss,
                          const Vector* example_weights = nullptr) {
    const auto n = data.size();
    const auto p = data.output_dim();
    double acc = 0.0;
    std::vector<double> ya(static_cast<std::size_t>(p));
    for (Eigen::Index a = 0; a < n; ++a) {
        for (Eigen::Index o = 0; o < p; ++o) ya[o] = data.targets(a, o);
        const double c = example_weights ? (*example_weights)(a) : 1.0;
        acc += c * loss.value(u.data() + a * p, ya.data(), static_cast<int>(p));
    }
    return acc / static_cast<double>(n);
}

/// B = Hessian of Phi_S in u: block diagonal with blocks c_a H_a / n.
inline Matrix output_hessian(const Vector& u, const Dataset& data, const Loss& loss,
                             const Vector* example_weights = nullptr) {
    const auto n = data.size();
    const auto p = data.output_dim();
    Matrix b = Matrix::Zero(n * p, n * p);
    std::vector<double> ya(static_cast<std::size_t>(p));
    for (Eigen::Index a = 0; a < n; ++a) {
        for (Eigen::Index o = 0; o < p; ++o) ya[o] = data.targets(a, o);
        const double c = (example_weights ? (*example_weights)(a) : 1.0) / static_cast<double>(n);
        b.block(a * p, a * p, p, p) = c * loss.hessian(u.data() + a * p, ya.data(), static_cast<int>(p));
    }
    return b;
}

// ---------------------------------------------------------------------------
// Synthetic datasets.

enum class GeneratorKind { linear_gaussian, noisy_teacher, modular_arithmetic, noisy_function_1d };

enum class ModularOp { add, sub, mul, div };

struct GeneratorConfig {
    GeneratorKind kind = GeneratorKind::linear_gaussian;
    int n = 10;                    // training examples (ignored for modular arithmetic)
    int n_test = 0;                // held-out examples drawn from the same source
    int input_dim = 2;             // linear-gaussian / noisy-teacher
    int output_dim = 1;            // linear-gaussian / noisy-teacher
    double noise_sd = 0.0;
    std::vector<int> teacher_hidden{8};  // noisy-teacher hidden widths
    int modulus = 7;
    ModularOp op = ModularOp::add;
    double train_fraction = 0.5;
    int frequency = 3;             // noisy-function-1d: number of sine components
    bool duplicate_first = false;  // append a copy of example 0 (exact reservoir direction)
};

struct DataSplit {
    Dataset train;
    Dataset test;
};

inline std::string to_string(GeneratorKind k) {
    switch (k) {
        case GeneratorKind::linear_gaussian: return "linear-gaussian";
        case GeneratorKind::noisy_teacher: return "noisy-teacher";
        case GeneratorKind::modular_arithmetic: return "modular-arithmetic";
        case GeneratorKind::noisy_function_1d: return "noisy-function-1d";
    }
    return "unknown";
}

inline GeneratorKind generator_from_string(const std::string& s) {
    if (s == "linear-gaussian") return GeneratorKind::linear_gaussian;
    if (s == "noisy-teacher") return GeneratorKind::noisy_teacher;
    if (s == "modular-arithmetic") return GeneratorKind::modular_arithmetic;
    if (s == "noisy-function-1d") return GeneratorKind::noisy_function_1d;
    throw ContractViolation("unknown generator: " + s);
}

inline ModularOp modular_op_from_string(const std::string& s) {
    if (s == "add") return ModularOp::add;
    if (s == "sub") return ModularOp::sub;
    if (s == "mul") return ModularOp::mul;
    if (s == "div") return ModularOp::div;
    throw ContractViolation("unknown modular op: " + s);
}

inline bool is_prime(int p) {
    if (p < 2) return false;
    for (int k = 2; k * k <= p; ++k)
        if (p % k == 0) return false;
    return true;
}

namespace detail {

inline long mod_pow(long base, long e, long m) {
    long r = 1 % m;
    base %= m;
    while (e > 0) {
        if (e & 1) r = r * base % m;
        base = base * base % m;
        e >>= 1;
    }
    return r;
}

inline Dataset make_gaussian_rows(const Matrix& x, const Matrix& clean, const Matrix& noise) {
    Dataset d;
    d.inputs = x;
    d.targets = clean + noise;
    d.noise = noise;
    return d;
}

inline void append_duplicate(Dataset& d) {
    const auto n = d.size();
    d.inputs.conservativeResize(n + 1, Eigen::NoChange);
    d.inputs.row(n) = d.inputs.row(0);
    d.targets.conservativeResize(n + 1, Eigen::NoChange);
    d.targets.row(n) = d.targets.row(0);
    if (d.noise) {
        d.noise->conservativeResize(n + 1, Eigen::NoChange);
        d.noise->row(n) = d.noise->row(0);
    }
}

}  // namespace detail

/// Train and held-out sets from one generator; the teacher (or modular table)
/// is shared between them. Bitwise deterministic for a given seed.
inline DataSplit make_split(const GeneratorConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    DataSplit out;
    const nlohmann::json meta = {{"generator", to_string(cfg.kind)}, {"seed", seed}};
    switch (cfg.kind) {
        case GeneratorKind::linear_gaussian: {
            require(cfg.n >= 1 && cfg.input_dim >= 1 && cfg.output_dim >= 1, "linear-gaussian: bad sizes");
            const Matrix w_star = rng.normal_matrix(cfg.input_dim, cfg.output_dim);
            auto draw = [&](int m) {
                const Matrix x = rng.normal_matrix(m, cfg.input_dim);
                const Matrix noise = rng.normal_matrix(m, cfg.output_dim, cfg.noise_sd);
                return detail::make_gaussian_rows(x, x * w_star, noise);
            };
            out.train = draw(cfg.n);
            if (cfg.n_test > 0) out.test = draw(cfg.n_test);
            break;
        }
        case GeneratorKind::noisy_teacher: {
            require(cfg.n >= 1 && cfg.input_dim >= 1 && cfg.output_dim >= 1, "noisy-teacher: bad sizes");
            std::vector<int> widths{cfg.input_dim};
            widths.insert(widths.end(), cfg.teacher_hidden.begin(), cfg.teacher_hidden.end());
            widths.push_back(cfg.output_dim);
            const Model teacher = Model::init({ModelKind::mlp, widths, Activation::tanh}, rng);
            auto draw = [&](int m) {
                const Matrix x = rng.normal_matrix(m, cfg.input_dim);
                const Matrix noise = rng.normal_matrix(m, cfg.output_dim, cfg.noise_sd);
                return detail::make_gaussian_rows(x, predict(teacher, x), noise);
            };
            out.train = draw(cfg.n);
            if (cfg.n_test > 0) out.test = draw(cfg.n_test);
            break;
        }
        case GeneratorKind::modular_arithmetic: {
            const int p = cfg.modulus;
            require(p >= 2, "modular-arithmetic: modulus must be >= 2");
            require(cfg.op != ModularOp::div || is_prime(p), "modular-arithmetic: division needs a prime modulus");
            require(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0, "modular-arithmetic: fraction in (0,1)");
            std::vector<std::pair<int, int>> pairs;
            for (int a = 0; a < p; ++a)
                for (int b = 0; b < p; ++b)
                    if (cfg.op != ModularOp::div || b != 0) pairs.emplace_back(a, b);
            const auto total = pairs.size();
            const auto n_train = static_cast<std::size_t>(std::lround(cfg.train_fraction * static_cast<double>(total)));
            const auto train_idx = rng.sample_without_replacement(total, n_train);
            std::vector<char> in_train(total, 0);
            for (auto i : train_idx) in_train[i] = 1;
            auto encode = [&](const std::vector<std::size_t>& ids) {
                Dataset d;
                d.inputs = Matrix::Zero(static_cast<Eigen::Index>(ids.size()), 2 * p);
                d.targets = Matrix::Zero(static_cast<Eigen::Index>(ids.size()), p);
                for (std::size_t k = 0; k < ids.size(); ++k) {
                    const auto [a, b] = pairs[ids[k]];
                    long c = 0;
                    switch (cfg.op) {
                        case ModularOp::add: c = (a + b) % p; break;
                        case ModularOp::sub: c = ((a - b) % p + p) % p; break;
                        case ModularOp::mul: c = (static_cast<long>(a) * b) % p; break;
                        case ModularOp::div: c = (a * detail::mod_pow(b, p - 2, p)) % p; break;
                    }
                    d.inputs(static_cast<Eigen::Index>(k), a) = 1.0;
                    d.inputs(static_cast<Eigen::Index>(k), p + b) = 1.0;
                    d.targets(static_cast<Eigen::Index>(k), c) = 1.0;
                }
                return d;
            };
            std::vector<std::size_t> test_idx;
            for (std::size_t i = 0; i < total; ++i)
                if (!in_train[i]) test_idx.push_back(i);
            out.train = encode(train_idx);
            out.test = encode(test_idx);
            break;
        }
        case GeneratorKind::noisy_function_1d: {
            require(cfg.n >= 2, "noisy-function-1d: need n >= 2");
            Vector amp(cfg.frequency), phase(cfg.frequency);
            for (int k = 0; k < cfg.frequency; ++k) {
                amp(k) = 1.0 / (k + 1.0);
                phase(k) = 2.0 * M_PI * rng.uniform();
            }
            auto f = [&](double x) {
                double acc = 0.0;
                for (int k = 0; k < cfg.frequency; ++k) acc += amp(k) * std::sin(M_PI * (k + 1) * x + phase(k));
                return acc;
            };
            auto grid = [&](int m, bool noisy) {
                Matrix x(m, 1), clean(m, 1), noise = Matrix::Zero(m, 1);
                for (int i = 0; i < m; ++i) {
                    x(i, 0) = -1.0 + 2.0 * i / (m - 1.0);
                    clean(i, 0) = f(x(i, 0));
                    if (noisy) noise(i, 0) = cfg.noise_sd * rng.normal();
                }
                return detail::make_gaussian_rows(x, clean, noise);
            };
            out.train = grid(cfg.n, true);
            if (cfg.n_test > 0) out.test = grid(cfg.n_test, false);
            break;
        }
    }
    if (cfg.duplicate_first) detail::append_duplicate(out.train);
    out.train.meta = meta;
    out.test.meta = meta;
    out.train.validate();
    return out;
}

/// Training set only.
inline Dataset make_dataset(const GeneratorConfig& cfg, std::uint64_t seed) { return make_split(cfg, seed).train; }

// ---------------------------------------------------------------------------
// JSON import/export: {inputs, targets, noise|null, meta:{generator, seed}}.

inline nlohmann::json matrix_to_json(const Matrix& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        nlohmann::json r = nlohmann::json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
        rows.push_back(std::move(r));
    }
    return rows;
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
    require(j.is_array() && !j.empty(), "matrix_from_json: expected non-empty array of rows");
    const auto rows = static_cast<Eigen::Index>(j.size());
    const auto cols = static_cast<Eigen::Index>(j[0].size());
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        require(static_cast<Eigen::Index>(j[i].size()) == cols, "matrix_from_json: ragged rows");
        for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = j[i][c].get<double>();
    }
    return m;
}

inline nlohmann::json dataset_to_json(const Dataset& d) {
    nlohmann::json j;
    j["inputs"] = matrix_to_json(d.inputs);
    j["targets"] = matrix_to_json(d.targets);
    j["noise"] = d.noise ? matrix_to_json(*d.noise) : nlohmann::json(nullptr);
    j["meta"] = d.meta;
    return j;
}

inline Dataset dataset_from_json(const nlohmann::json& j) {
    for (auto it = j.begin(); it != j.end(); ++it)
        require(it.key() == "inputs" || it.key() == "targets" || it.key() == "noise" || it.key() == "meta",
                "dataset json: unknown key " + it.key());
    Dataset d;
    d.inputs = matrix_from_json(j.at("inputs"));
    d.targets = matrix_from_json(j.at("targets"));
    if (j.contains("noise") && !j["noise"].is_null()) d.noise = matrix_from_json(j["noise"]);
    if (j.contains("meta")) d.meta = j["meta"];
    d.validate();
    return d;
}

}  // namespace poprisk
