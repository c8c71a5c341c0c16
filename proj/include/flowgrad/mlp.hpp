#pragma once

// Small tanh MLP with a hand-written reverse pass, and the EDM-preconditioned
// denoiser built on it.

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "flowgrad/core.hpp"
#include "flowgrad/velocity.hpp"

namespace flowgrad {

/// Fully connected network: tanh on hidden layers, linear output layer.
/// Layer l maps widths[l] -> widths[l+1] with a row-major (out x in) weight.
class Mlp {
public:
    struct Layer {
        Matrix weight;
        Vec bias;
        bool operator==(const Layer&) const = default;
    };

    /// Parameter-shaped gradient buffer.
    struct Gradients {
        std::vector<Layer> layers;

        void scale(double alpha) {
            for (auto& l : layers) {
                for (double& v : l.weight.data) v *= alpha;
                for (double& v : l.bias) v *= alpha;
            }
        }
        void add(const Gradients& other) {
            for (std::size_t i = 0; i < layers.size(); ++i) {
                axpy(1.0, other.layers[i].weight.data, layers[i].weight.data);
                axpy(1.0, other.layers[i].bias, layers[i].bias);
            }
        }
    };

    /// Activations recorded by forward(); index 0 is the input.
    struct Tape {
        std::vector<Vec> activations;
    };

    Mlp() = default;

    /// Zero-initialised parameters.
    explicit Mlp(std::vector<std::size_t> widths) : widths_(std::move(widths)) {
        if (widths_.size() < 2) throw ContractError("Mlp: need at least input and output widths");
        for (auto w : widths_)
            if (w == 0) throw ContractError("Mlp: zero layer width");
        for (std::size_t l = 0; l + 1 < widths_.size(); ++l)
            layers_.push_back({Matrix(widths_[l + 1], widths_[l]), Vec(widths_[l + 1], 0.0)});
    }

    /// Gaussian init with variance 1/fan_in. Inputs whose typical centre and
    /// spread are given have their first-layer columns rescaled so the initial
    /// pre-activations are unit scale.
    static Mlp initialized(std::vector<std::size_t> widths, std::uint64_t seed,
                           std::span<const double> input_center = {}, std::span<const double> input_scale = {}) {
        Mlp net(std::move(widths));
        NormalStream rng(seed);
        for (auto& layer : net.layers_) {
            const double sd = 1.0 / std::sqrt(static_cast<double>(layer.weight.cols));
            for (double& w : layer.weight.data) w = sd * rng.normal();
        }
        auto& first = net.layers_.front();
        for (std::size_t j = 0; j < input_scale.size() && j < first.weight.cols; ++j) {
            const double centre = j < input_center.size() ? input_center[j] : 0.0;
            for (std::size_t i = 0; i < first.weight.rows; ++i) {
                first.weight(i, j) /= input_scale[j];
                first.bias[i] -= first.weight(i, j) * centre;
            }
        }
        return net;
    }

    const std::vector<std::size_t>& widths() const { return widths_; }
    std::size_t input_size() const { return widths_.front(); }
    std::size_t output_size() const { return widths_.back(); }
    std::vector<Layer>& layers() { return layers_; }
    const std::vector<Layer>& layers() const { return layers_; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers_) n += l.weight.data.size() + l.bias.size();
        return n;
    }

    bool parameters_finite() const {
        for (const auto& l : layers_)
            if (!all_finite(l.weight.data) || !all_finite(l.bias)) return false;
        return true;
    }

    Gradients zero_gradients() const {
        Gradients g;
        for (const auto& l : layers_) g.layers.push_back({Matrix(l.weight.rows, l.weight.cols), Vec(l.bias.size(), 0.0)});
        return g;
    }

    Vec forward(std::span<const double> input, Tape* tape = nullptr) const {
        if (input.size() != input_size())
            throw ContractError("Mlp: input has " + std::to_string(input.size()) + " entries, expected " +
                                std::to_string(input_size()));
        Vec h(input.begin(), input.end());
        if (tape) {
            tape->activations.clear();
            tape->activations.push_back(h);
        }
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            Vec z = layers_[l].weight.apply(h);
            axpy(1.0, layers_[l].bias, z);
            if (l + 1 < layers_.size())
                for (double& v : z) v = std::tanh(v);
            h = std::move(z);
            if (tape) tape->activations.push_back(h);
        }
        return h;
    }

    /// Reverse pass: returns cotangent^T d(output)/d(input); accumulates
    /// parameter gradients into *grads when given.
    Vec backward(const Tape& tape, std::span<const double> cotangent, Gradients* grads = nullptr) const {
        if (cotangent.size() != output_size()) throw ContractError("Mlp: cotangent size differs from output");
        if (tape.activations.size() != layers_.size() + 1) throw ContractError("Mlp: tape does not match network");
        Vec g(cotangent.begin(), cotangent.end());
        for (std::size_t l = layers_.size(); l-- > 0;) {
            if (l + 1 < layers_.size()) {
                const Vec& y = tape.activations[l + 1];
                for (std::size_t i = 0; i < g.size(); ++i) g[i] *= 1.0 - y[i] * y[i];
            }
            if (grads) {
                auto& gl = grads->layers[l];
                const Vec& in = tape.activations[l];
                for (std::size_t i = 0; i < g.size(); ++i) {
                    gl.bias[i] += g[i];
                    axpy(g[i], in, std::span(gl.weight.data).subspan(i * in.size(), in.size()));
                }
            }
            g = layers_[l].weight.apply_transposed(g);
        }
        return g;
    }

    bool operator==(const Mlp&) const = default;

private:
    std::vector<std::size_t> widths_;
    std::vector<Layer> layers_;
};

struct ForwardBackward {
    Vec output;
    Vec input_gradient;
    Mlp::Gradients parameter_gradients;
};

inline ForwardBackward mlp_forward_backward(const Mlp& net, std::span<const double> inputs,
                                            std::span<const double> output_cotangent) {
    Mlp::Tape tape;
    ForwardBackward out;
    out.output = net.forward(inputs, &tape);
    out.parameter_gradients = net.zero_gradients();
    out.input_gradient = net.backward(tape, output_cotangent, &out.parameter_gradients);
    return out;
}

// ---------------------------------------------------------------------------

/// EDM preconditioning scalars at noise level sigma.
struct EdmScalings {
    double skip;
    double out;
    double in;
    double noise;

    static EdmScalings at(double sigma, double sigma_data) {
        const double sd2 = sigma_data * sigma_data;
        const double denom = sigma * sigma + sd2;
        return {sd2 / denom, sigma * sigma_data / std::sqrt(denom), 1.0 / std::sqrt(denom), 0.25 * std::log(sigma)};
    }
};

/// D(x; sigma, cond) = c_skip x + c_out F([c_in x, c_noise, c, scalars]).
/// The network input is the concatenation in that order; its output has the
/// state's size.
class MlpDenoiser final : public Denoiser {
public:
    MlpDenoiser(Mlp net, Shape state_shape, Shape cond_shape, std::vector<std::string> scalar_names,
                double sigma_data = 0.5)
        : net_(std::move(net)), sigma_data_(sigma_data) {
        desc_ = {"mlp_denoiser", std::move(state_shape), std::move(cond_shape), std::move(scalar_names)};
        const auto n = shape_size(desc_.state_shape);
        const auto expect_in = n + 1 + shape_size(desc_.cond_shape) + desc_.scalar_names.size();
        if (net_.input_size() != expect_in || net_.output_size() != n)
            throw ContractError("MlpDenoiser: network widths do not chain with state/conditioning shapes");
        if (!(sigma_data_ > 0.0)) throw ConfigError("MlpDenoiser: sigma_data must be > 0");
        if (!net_.parameters_finite()) throw ContractError("MlpDenoiser: non-finite parameters");
    }

    static std::size_t input_width(std::size_t state_dim, std::size_t cond_dim, std::size_t n_scalars) {
        return state_dim + 1 + cond_dim + n_scalars;
    }

    const FieldDescriptor& descriptor() const override { return desc_; }
    const Mlp& net() const { return net_; }
    double sigma_data() const { return sigma_data_; }

    Vec network_input(std::span<const double> x, double sigma, const Conditioning& cond) const {
        const auto sc = EdmScalings::at(sigma, sigma_data_);
        Vec in;
        in.reserve(net_.input_size());
        for (double v : x) in.push_back(sc.in * v);
        in.push_back(sc.noise);
        in.insert(in.end(), cond.c().data().begin(), cond.c().data().end());
        for (const auto& s : cond.scalars()) in.push_back(s.value);
        return in;
    }

    Vec denoise(std::span<const double> x, double sigma, const Conditioning& cond) const override {
        const auto sc = EdmScalings::at(sigma, sigma_data_);
        Vec d = net_.forward(network_input(x, sigma, cond));
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = sc.skip * x[i] + sc.out * d[i];
        return d;
    }

    Pullback pullback(std::span<const double> a, std::span<const double> x, double sigma,
                      const Conditioning& cond) const override {
        const auto sc = EdmScalings::at(sigma, sigma_data_);
        Mlp::Tape tape;
        net_.forward(network_input(x, sigma, cond), &tape);
        const Vec g = net_.backward(tape, scaled(a, sc.out));

        const std::size_t n = x.size();
        const std::size_t m = cond.c().size();
        Pullback pb;
        pb.state.resize(n);
        for (std::size_t i = 0; i < n; ++i) pb.state[i] = sc.skip * a[i] + sc.in * g[i];
        pb.c.assign(g.begin() + static_cast<std::ptrdiff_t>(n + 1), g.begin() + static_cast<std::ptrdiff_t>(n + 1 + m));
        pb.scalars.assign(g.begin() + static_cast<std::ptrdiff_t>(n + 1 + m), g.end());
        return pb;
    }

private:
    Mlp net_;
    double sigma_data_;
    FieldDescriptor desc_;
};

}  // namespace flowgrad
