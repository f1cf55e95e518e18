#include "fedsim/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <thread>

#include "fedsim/rng.hpp"

namespace fedsim {

const std::array<Tensor ModelParams::*, 8>& ModelParams::fields() {
    static const std::array<Tensor ModelParams::*, 8> kFields = {
        &ModelParams::conv1_w, &ModelParams::conv1_b, &ModelParams::conv2_w,
        &ModelParams::conv2_b, &ModelParams::fc1_w,   &ModelParams::fc1_b,
        &ModelParams::fc2_w,   &ModelParams::fc2_b,
    };
    return kFields;
}

const std::array<const char*, 8>& ModelParams::field_names() {
    static const std::array<const char*, 8> kNames = {
        "conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b",
    };
    return kNames;
}

bool ModelParams::operator==(const ModelParams& o) const {
    for (auto f : fields()) {
        if (!(this->*f == o.*f)) return false;
    }
    return true;
}

ModelParams init_params(std::uint64_t seed) {
    Rng rng(seed);
    ModelParams p;
    auto init_weight = [&rng](Tensor& w, int fan_in) {
        const double limit = std::sqrt(1.0 / fan_in);
        double* d = w.data();
        for (std::size_t i = 0; i < w.size(); ++i) d[i] = rng.uniform(-limit, limit);
    };
    init_weight(p.conv1_w, 1 * kKernel * kKernel);
    init_weight(p.conv2_w, kConv1Channels * kKernel * kKernel);
    init_weight(p.fc1_w, kFlattenedSize);
    init_weight(p.fc2_w, kHiddenSize);
    return p;  // biases stay zero
}

void adam_update(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, long t,
                 const AdamHyper& hyper) {
    if (!param.same_shape(grad)) {
        throw std::invalid_argument("adam_update: gradient shape " + shape_string(grad.shape()) +
                                    " does not match parameter shape " +
                                    shape_string(param.shape()));
    }
    if (!param.same_shape(m) || !param.same_shape(v)) {
        throw std::invalid_argument("adam_update: moment shape does not match parameter shape");
    }
    const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(t));
    double* p = param.data();
    const double* g = grad.data();
    double* md = m.data();
    double* vd = v.data();
    for (std::size_t i = 0; i < param.size(); ++i) {
        md[i] = hyper.beta1 * md[i] + (1.0 - hyper.beta1) * g[i];
        vd[i] = hyper.beta2 * vd[i] + (1.0 - hyper.beta2) * g[i] * g[i];
        const double m_hat = md[i] / bc1;
        const double v_hat = vd[i] / bc2;
        p[i] -= hyper.learning_rate * m_hat / (std::sqrt(v_hat) + hyper.epsilon);
    }
}

void adam_step(ModelParams& params, const Gradients& grads, AdamState& state) {
    const long t = state.step_count + 1;
    for (auto f : ModelParams::fields()) {
        adam_update(params.*f, grads.*f, state.m.*f, state.v.*f, t, state.hyper);
    }
    state.step_count = t;
}

namespace {

// out[o,y,x] += w * in[c,y+dy-1,x+dx-1] over the in-range window, for every
// (o,c,dy,dx). The inner x loop is contiguous in both planes.
void conv2d_into(const Tensor& input, const Tensor& kernels, const Tensor& bias, Tensor& out) {
    const int c_in = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int c_out = kernels.dim(0);
    const double* in = input.data();
    const double* k = kernels.data();
    double* o_data = out.data();

    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int o = 0; o < c_out; ++o) {
        double* out_plane = o_data + o * plane;
        const double b = bias[static_cast<std::size_t>(o)];
        for (std::size_t i = 0; i < plane; ++i) out_plane[i] = b;
        for (int c = 0; c < c_in; ++c) {
            const double* in_plane = in + c * plane;
            const double* kslice = k + (static_cast<std::size_t>(o) * c_in + c) * 9;
            for (int dy = 0; dy < 3; ++dy) {
                const int y0 = std::max(0, 1 - dy);
                const int y1 = std::min(h, h + 1 - dy);
                for (int dx = 0; dx < 3; ++dx) {
                    const double kw = kslice[dy * 3 + dx];
                    const int x0 = std::max(0, 1 - dx);
                    const int x1 = std::min(w, w + 1 - dx);
                    for (int y = y0; y < y1; ++y) {
                        const double* irow = in_plane + (y + dy - 1) * w + (x0 + dx - 1);
                        double* orow = out_plane + y * w + x0;
                        for (int x = 0; x < x1 - x0; ++x) orow[x] += kw * irow[x];
                    }
                }
            }
        }
    }
}

void check_conv_shapes(const Tensor& input, const Tensor& kernels, const Tensor& bias) {
    if (input.rank() != 3) {
        throw std::invalid_argument("conv2d: input must be rank 3, got shape " +
                                    shape_string(input.shape()));
    }
    if (kernels.rank() != 4) {
        throw std::invalid_argument("conv2d: kernels must be rank 4, got shape " +
                                    shape_string(kernels.shape()));
    }
    if (kernels.dim(2) != kKernel || kernels.dim(3) != kKernel) {
        throw std::invalid_argument("conv2d: kernel spatial dims (2,3) must be 3x3, got " +
                                    std::to_string(kernels.dim(2)) + "x" +
                                    std::to_string(kernels.dim(3)));
    }
    if (input.dim(0) != kernels.dim(1)) {
        throw std::invalid_argument("conv2d: input channels (dim 0) = " +
                                    std::to_string(input.dim(0)) +
                                    " do not match kernel input channels (dim 1) = " +
                                    std::to_string(kernels.dim(1)));
    }
    if (bias.rank() != 1 || bias.dim(0) != kernels.dim(0)) {
        throw std::invalid_argument("conv2d: bias shape " + shape_string(bias.shape()) +
                                    " does not match kernel output channels (dim 0) = " +
                                    std::to_string(kernels.dim(0)));
    }
}

void maxpool2_into(const Tensor& input, Tensor& out, std::vector<int>* argmax) {
    const int c = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int oh = h / 2, ow = w / 2;
    const double* in = input.data();
    double* o_data = out.data();
    if (argmax) argmax->resize(out.size());

    std::size_t oi = 0;
    for (int ch = 0; ch < c; ++ch) {
        const double* plane = in + static_cast<std::size_t>(ch) * h * w;
        for (int y = 0; y < oh; ++y) {
            for (int x = 0; x < ow; ++x, ++oi) {
                const int base = (2 * y) * w + 2 * x;
                // candidates in row-major order; strict > keeps the first on ties
                int best = base;
                double best_v = plane[base];
                const int cand[3] = {base + 1, base + w, base + w + 1};
                for (int idx : cand) {
                    if (plane[idx] > best_v) {
                        best_v = plane[idx];
                        best = idx;
                    }
                }
                o_data[oi] = best_v;
                if (argmax) (*argmax)[oi] = static_cast<int>(ch * h * w) + best;
            }
        }
    }
}

// out = W x + b with W stored row-major [rows, cols].
void fc_into(const Tensor& weight, const Tensor& bias, const double* x, double* out) {
    const int rows = weight.dim(0), cols = weight.dim(1);
    const double* wd = weight.data();
    for (int j = 0; j < rows; ++j) {
        const double* row = wd + static_cast<std::size_t>(j) * cols;
        double acc = bias[static_cast<std::size_t>(j)];
        for (int i = 0; i < cols; ++i) acc += row[i] * x[i];
        out[j] = acc;
    }
}

void relu_into(const Tensor& in, Tensor& out) {
    const double* i = in.data();
    double* o = out.data();
    for (std::size_t n = 0; n < in.size(); ++n) o[n] = i[n] > 0.0 ? i[n] : 0.0;
}

// Max-subtraction stabilized softmax.
void softmax_into(const double* z, double* p, int n) {
    double mx = z[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, z[i]);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        p[i] = std::exp(z[i] - mx);
        sum += p[i];
    }
    for (int i = 0; i < n; ++i) p[i] /= sum;
}

// Per-example activations, allocated once and reused across a batch.
struct FwdCache {
    Tensor x{std::vector<int>{1, kImageH, kImageW}};
    Tensor a1{std::vector<int>{kConv1Channels, kImageH, kImageW}};
    Tensor r1{std::vector<int>{kConv1Channels, kImageH, kImageW}};
    Tensor p1{std::vector<int>{kConv1Channels, kImageH / 2, kImageW / 2}};
    std::vector<int> idx1;
    Tensor a2{std::vector<int>{kConv2Channels, kImageH / 2, kImageW / 2}};
    Tensor r2{std::vector<int>{kConv2Channels, kImageH / 2, kImageW / 2}};
    Tensor p2{std::vector<int>{kConv2Channels, kImageH / 4, kImageW / 4}};  // flat view is the 1568 vector
    std::vector<int> idx2;
    Tensor z1{std::vector<int>{kHiddenSize}};
    Tensor h1{std::vector<int>{kHiddenSize}};
    Tensor z2{std::vector<int>{kNumClasses}};
    Tensor probs{std::vector<int>{kNumClasses}};
};

void forward_example(const ModelParams& params, const double* image, FwdCache& c) {
    std::memcpy(c.x.data(), image, sizeof(double) * c.x.size());
    conv2d_into(c.x, params.conv1_w, params.conv1_b, c.a1);
    relu_into(c.a1, c.r1);
    maxpool2_into(c.r1, c.p1, &c.idx1);
    conv2d_into(c.p1, params.conv2_w, params.conv2_b, c.a2);
    relu_into(c.a2, c.r2);
    maxpool2_into(c.r2, c.p2, &c.idx2);
    fc_into(params.fc1_w, params.fc1_b, c.p2.data(), c.z1.data());
    relu_into(c.z1, c.h1);
    fc_into(params.fc2_w, params.fc2_b, c.h1.data(), c.z2.data());
    softmax_into(c.z2.data(), c.probs.data(), kNumClasses);
}

void check_batch_shape(const Tensor& batch) {
    if (batch.rank() != 4 || batch.dim(1) != 1 || batch.dim(2) != kImageH ||
        batch.dim(3) != kImageW) {
        throw std::invalid_argument("model input must be [N,1,28,28], got shape " +
                                    shape_string(batch.shape()));
    }
}

void check_labels(const std::vector<int>& labels, int n) {
    if (static_cast<int>(labels.size()) != n) {
        throw std::invalid_argument("label count " + std::to_string(labels.size()) +
                                    " does not match batch size " + std::to_string(n));
    }
    for (int l : labels) {
        if (l < 0 || l >= kNumClasses) {
            throw std::invalid_argument("label " + std::to_string(l) + " out of range 0.." +
                                        std::to_string(kNumClasses - 1));
        }
    }
}

// dW[j,i] += dz[j]*x[i]; db[j] += dz[j]; dx[i] = sum_j W[j,i]*dz[j]
void fc_backward(const Tensor& weight, const double* x, const double* dz, Tensor& d_weight,
                 Tensor& d_bias, double* dx) {
    const int rows = weight.dim(0), cols = weight.dim(1);
    const double* wd = weight.data();
    double* dwd = d_weight.data();
    if (dx) {
        for (int i = 0; i < cols; ++i) dx[i] = 0.0;
    }
    for (int j = 0; j < rows; ++j) {
        const double g = dz[j];
        d_bias[static_cast<std::size_t>(j)] += g;
        const double* wrow = wd + static_cast<std::size_t>(j) * cols;
        double* dwrow = dwd + static_cast<std::size_t>(j) * cols;
        for (int i = 0; i < cols; ++i) dwrow[i] += g * x[i];
        if (dx) {
            for (int i = 0; i < cols; ++i) dx[i] += wrow[i] * g;
        }
    }
}

void relu_backward(const Tensor& pre, const Tensor& d_post, Tensor& d_pre) {
    const double* a = pre.data();
    const double* dr = d_post.data();
    double* da = d_pre.data();
    for (std::size_t i = 0; i < pre.size(); ++i) da[i] = a[i] > 0.0 ? dr[i] : 0.0;
}

void unpool_into(const Tensor& d_pooled, const std::vector<int>& argmax, Tensor& d_unpooled) {
    d_unpooled.fill(0.0);
    const double* dp = d_pooled.data();
    double* du = d_unpooled.data();
    for (std::size_t i = 0; i < d_pooled.size(); ++i) {
        du[static_cast<std::size_t>(argmax[i])] += dp[i];
    }
}

struct BwdCache {
    Tensor dz2{std::vector<int>{kNumClasses}};
    Tensor dh1{std::vector<int>{kHiddenSize}};
    Tensor dz1{std::vector<int>{kHiddenSize}};
    Tensor dp2{std::vector<int>{kConv2Channels, kImageH / 4, kImageW / 4}};
    Tensor dr2{std::vector<int>{kConv2Channels, kImageH / 2, kImageW / 2}};
    Tensor da2{std::vector<int>{kConv2Channels, kImageH / 2, kImageW / 2}};
    Tensor dp1{std::vector<int>{kConv1Channels, kImageH / 2, kImageW / 2}};
    Tensor dr1{std::vector<int>{kConv1Channels, kImageH, kImageW}};
    Tensor da1{std::vector<int>{kConv1Channels, kImageH, kImageW}};
};

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias) {
    check_conv_shapes(input, kernels, bias);
    Tensor out({kernels.dim(0), input.dim(1), input.dim(2)});
    conv2d_into(input, kernels, bias, out);
    return out;
}

void conv2d_backward(const Tensor& input, const Tensor& kernels, const Tensor& d_out,
                     Tensor& d_kernels, Tensor& d_bias, Tensor* d_input) {
    const int c_in = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int c_out = kernels.dim(0);
    const double* in = input.data();
    const double* k = kernels.data();
    const double* dout = d_out.data();
    double* dk = d_kernels.data();
    double* din = d_input ? d_input->data() : nullptr;
    if (d_input) d_input->fill(0.0);

    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int o = 0; o < c_out; ++o) {
        const double* dout_plane = dout + o * plane;
        double acc_b = 0.0;
        for (std::size_t i = 0; i < plane; ++i) acc_b += dout_plane[i];
        d_bias[static_cast<std::size_t>(o)] += acc_b;

        for (int c = 0; c < c_in; ++c) {
            const double* in_plane = in + c * plane;
            double* din_plane = din ? din + c * plane : nullptr;
            const std::size_t kbase = (static_cast<std::size_t>(o) * c_in + c) * 9;
            for (int dy = 0; dy < 3; ++dy) {
                const int y0 = std::max(0, 1 - dy);
                const int y1 = std::min(h, h + 1 - dy);
                for (int dx = 0; dx < 3; ++dx) {
                    const int x0 = std::max(0, 1 - dx);
                    const int x1 = std::min(w, w + 1 - dx);
                    const double kw = k[kbase + dy * 3 + dx];
                    double acc_k = 0.0;
                    for (int y = y0; y < y1; ++y) {
                        const double* irow = in_plane + (y + dy - 1) * w + (x0 + dx - 1);
                        const double* drow = dout_plane + y * w + x0;
                        for (int x = 0; x < x1 - x0; ++x) acc_k += irow[x] * drow[x];
                        if (din_plane) {
                            double* dirow = din_plane + (y + dy - 1) * w + (x0 + dx - 1);
                            for (int x = 0; x < x1 - x0; ++x) dirow[x] += kw * drow[x];
                        }
                    }
                    dk[kbase + dy * 3 + dx] += acc_k;
                }
            }
        }
    }
}

Tensor maxpool2(const Tensor& input, std::vector<int>* argmax) {
    if (input.rank() != 3) {
        throw std::invalid_argument("maxpool2: input must be rank 3, got shape " +
                                    shape_string(input.shape()));
    }
    if (input.dim(1) % 2 != 0 || input.dim(2) % 2 != 0) {
        throw std::invalid_argument("maxpool2: height and width must be even, got " +
                                    shape_string(input.shape()));
    }
    Tensor out({input.dim(0), input.dim(1) / 2, input.dim(2) / 2});
    maxpool2_into(input, out, argmax);
    return out;
}

Tensor model_forward(const ModelParams& params, const Tensor& batch) {
    check_batch_shape(batch);
    const int n = batch.dim(0);
    Tensor probs({n, kNumClasses});
    FwdCache cache;
    for (int i = 0; i < n; ++i) {
        forward_example(params, batch.data() + static_cast<std::size_t>(i) * cache.x.size(),
                        cache);
        std::memcpy(probs.data() + static_cast<std::size_t>(i) * kNumClasses, cache.probs.data(),
                    sizeof(double) * kNumClasses);
    }
    return probs;
}

Tensor model_logits(const ModelParams& params, const Tensor& batch) {
    check_batch_shape(batch);
    const int n = batch.dim(0);
    Tensor logits({n, kNumClasses});
    FwdCache cache;
    for (int i = 0; i < n; ++i) {
        forward_example(params, batch.data() + static_cast<std::size_t>(i) * cache.x.size(),
                        cache);
        std::memcpy(logits.data() + static_cast<std::size_t>(i) * kNumClasses, cache.z2.data(),
                    sizeof(double) * kNumClasses);
    }
    return logits;
}

double model_loss(const ModelParams& params, const Tensor& batch, const std::vector<int>& labels) {
    check_batch_shape(batch);
    const int n = batch.dim(0);
    check_labels(labels, n);
    FwdCache cache;
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        forward_example(params, batch.data() + static_cast<std::size_t>(i) * cache.x.size(),
                        cache);
        loss += -std::log(cache.probs[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])]);
    }
    return loss / n;
}

BackwardResult model_backward(const ModelParams& params, const Tensor& batch,
                              const std::vector<int>& labels) {
    check_batch_shape(batch);
    const int n = batch.dim(0);
    if (n < 1) throw std::invalid_argument("model_backward: batch must be non-empty");
    check_labels(labels, n);

    BackwardResult result;
    Gradients& g = result.grads;
    FwdCache c;
    BwdCache b;
    const double inv_n = 1.0 / n;

    for (int i = 0; i < n; ++i) {
        forward_example(params, batch.data() + static_cast<std::size_t>(i) * c.x.size(), c);
        const int label = labels[static_cast<std::size_t>(i)];
        result.loss += -std::log(c.probs[static_cast<std::size_t>(label)]);

        // softmax + cross-entropy: d(loss)/d(logit) = (p - onehot)/N
        for (int j = 0; j < kNumClasses; ++j) {
            b.dz2[static_cast<std::size_t>(j)] =
                (c.probs[static_cast<std::size_t>(j)] - (j == label ? 1.0 : 0.0)) * inv_n;
        }
        fc_backward(params.fc2_w, c.h1.data(), b.dz2.data(), g.fc2_w, g.fc2_b, b.dh1.data());
        relu_backward(c.z1, b.dh1, b.dz1);
        fc_backward(params.fc1_w, c.p2.data(), b.dz1.data(), g.fc1_w, g.fc1_b, b.dp2.data());
        unpool_into(b.dp2, c.idx2, b.dr2);
        relu_backward(c.a2, b.dr2, b.da2);
        conv2d_backward(c.p1, params.conv2_w, b.da2, g.conv2_w, g.conv2_b, &b.dp1);
        unpool_into(b.dp1, c.idx1, b.dr1);
        relu_backward(c.a1, b.dr1, b.da1);
        conv2d_backward(c.x, params.conv1_w, b.da1, g.conv1_w, g.conv1_b, nullptr);
    }
    result.loss *= inv_n;
    return result;
}

namespace {

int count_correct(const ModelParams& params, const std::vector<Example>& dataset,
                  std::size_t begin, std::size_t end) {
    FwdCache cache;
    int correct = 0;
    for (std::size_t i = begin; i < end; ++i) {
        forward_example(params, dataset[i].image.data(), cache);
        int arg = 0;
        double best = cache.probs[0];
        for (int j = 1; j < kNumClasses; ++j) {
            if (cache.probs[static_cast<std::size_t>(j)] > best) {  // ties keep the lowest index
                best = cache.probs[static_cast<std::size_t>(j)];
                arg = j;
            }
        }
        if (arg == dataset[i].label) ++correct;
    }
    return correct;
}

}  // namespace

double evaluate(const ModelParams& params, const std::vector<Example>& dataset, int threads) {
    if (dataset.empty()) throw std::invalid_argument("evaluate: dataset must be non-empty");
    const std::size_t n = dataset.size();
    const int workers = std::max(1, std::min<int>(threads, static_cast<int>(n)));
    if (workers == 1) {
        return static_cast<double>(count_correct(params, dataset, 0, n)) / static_cast<double>(n);
    }

    std::vector<int> counts(static_cast<std::size_t>(workers), 0);
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    const std::size_t chunk = (n + workers - 1) / workers;
    for (int t = 0; t < workers; ++t) {
        const std::size_t begin = std::min(n, static_cast<std::size_t>(t) * chunk);
        const std::size_t end = std::min(n, begin + chunk);
        pool.emplace_back([&, t, begin, end] {
            counts[static_cast<std::size_t>(t)] = count_correct(params, dataset, begin, end);
        });
    }
    for (auto& th : pool) th.join();
    int total = 0;
    for (int c : counts) total += c;
    return static_cast<double>(total) / static_cast<double>(n);
}

}  // namespace fedsim
