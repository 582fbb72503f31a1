#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "maskdoor/common.hpp"

namespace maskdoor::nn {

// Planar CHW float tensor. Same layout as core::Image so image buffers pass
// through the net without repacking.
struct Tensor {
    int c = 0, h = 0, w = 0;
    std::vector<float> v;

    Tensor() = default;
    Tensor(int channels, int height, int width, float fill = 0.0f)
        : c(channels), h(height), w(width),
          v(size_t(channels) * height * width, fill) {}

    float& at(int ch, int i, int j) { return v[(size_t(ch) * h + i) * w + j]; }
    float at(int ch, int i, int j) const { return v[(size_t(ch) * h + i) * w + j]; }
    size_t size() const { return v.size(); }
    void zero() { std::fill(v.begin(), v.end(), 0.0f); }
};

// ---------------------------------------------------------------------------
// GEMM primitives. A, B, C are dense row-major. All accumulate into C with a
// scalar multiplier so backward passes can fold loss weights into one pass.
// ---------------------------------------------------------------------------

// C(MxN) += scale * A(MxK) * B(KxN)
void gemm_nn(float* C, const float* A, const float* B, int M, int N, int K, float scale);
// C(MxN) += scale * A(MxK) * B(NxK)^T
void gemm_nt(float* C, const float* A, const float* B, int M, int N, int K, float scale);
// C(MxN) += scale * A(KxM)^T * B(KxN)
void gemm_tn(float* C, const float* A, const float* B, int M, int N, int K, float scale);

// ---------------------------------------------------------------------------
// im2col / col2im for 2-D convolution with square kernels.
// cols is (C*k*k) x (out_h*out_w); out-of-bounds taps are zero.
// ---------------------------------------------------------------------------
void im2col(const Tensor& img, int k, int stride, int pad, int out_h, int out_w,
            std::vector<float>& cols);
void col2im(const std::vector<float>& cols, int k, int stride, int pad,
            int out_h, int out_w, Tensor& img);

inline int conv_out_dim(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

// ---------------------------------------------------------------------------
// Layers. Parameters live in the layer; gradients live in a parallel buffer
// owned by the caller so worker threads can accumulate independently.
// ---------------------------------------------------------------------------

struct Conv2d {
    int in_ch = 0, out_ch = 0, k = 3, stride = 1, pad = 1;
    std::vector<float> weight;  // (out_ch) x (in_ch*k*k)
    std::vector<float> bias;    // (out_ch)

    Conv2d() = default;
    Conv2d(int in_c, int out_c, int kernel, int s, int p);
    void init_he(Rng& rng, float gain = 1.0f);
    size_t weight_count() const { return weight.size(); }
};

// Transposed convolution. Weight layout (in_ch) x (out_ch*k*k), torch-style.
// Output size: (in-1)*stride - 2*pad + k + output_pad.
struct ConvTranspose2d {
    int in_ch = 0, out_ch = 0, k = 3, stride = 2, pad = 1, output_pad = 1;
    std::vector<float> weight;
    std::vector<float> bias;

    ConvTranspose2d() = default;
    ConvTranspose2d(int in_c, int out_c, int kernel, int s, int p, int op);
    void init_he(Rng& rng, float gain = 1.0f);
};

struct ConvGrad {
    std::vector<float> weight;
    std::vector<float> bias;
    void match(size_t wn, size_t bn) {
        weight.assign(wn, 0.0f);
        bias.assign(bn, 0.0f);
    }
    void zero() {
        std::fill(weight.begin(), weight.end(), 0.0f);
        std::fill(bias.begin(), bias.end(), 0.0f);
    }
    void add(const ConvGrad& o);
};

// Forward saves the im2col buffer in `cols` for the backward pass.
Tensor conv2d_forward(const Conv2d& l, const Tensor& x, std::vector<float>& cols);

// Accumulates param grads scaled by param_scale; writes input grad into gx
// when gx != nullptr (gx must be pre-shaped like the forward input, zeroed).
void conv2d_backward(const Conv2d& l, const std::vector<float>& cols,
                     const Tensor& gy, ConvGrad& g, float param_scale, Tensor* gx);

Tensor convt2d_forward(const ConvTranspose2d& l, const Tensor& x);
// Needs the forward input x for the weight gradient.
void convt2d_backward(const ConvTranspose2d& l, const Tensor& x, const Tensor& gy,
                      ConvGrad& g, float param_scale, Tensor* gx,
                      std::vector<float>& scratch);

// Activations, in place. Backward derives the local slope from the output.
void relu_(Tensor& t);
void relu_backward_(const Tensor& y, Tensor& gy);
void leaky_relu_(Tensor& t, float slope);
void leaky_relu_backward_(const Tensor& y, Tensor& gy, float slope);
void tanh_(Tensor& t);
void tanh_backward_(const Tensor& y, Tensor& gy);

// ---------------------------------------------------------------------------
// Adam over a flat list of parameter arrays.
// ---------------------------------------------------------------------------
struct ParamRef {
    float* data = nullptr;
    size_t n = 0;
};

class Adam {
public:
    Adam() = default;
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(const std::vector<ParamRef>& params,
              const std::vector<const float*>& grads);

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }
    int64_t t() const { return t_; }

private:
    double lr_ = 1e-3, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    int64_t t_ = 0;
    std::vector<std::vector<float>> m_, v_;
};

// ---------------------------------------------------------------------------
// Checkpoint container: a JSON meta blob plus named raw float arrays.
// Little-endian binary; round-trips bit-exact.
// ---------------------------------------------------------------------------
struct NamedArray {
    std::string name;
    const float* data = nullptr;
    size_t n = 0;
};

void write_checkpoint(std::ostream& os, const std::string& meta_json,
                      const std::vector<NamedArray>& arrays);

struct LoadedCheckpoint {
    std::string meta_json;
    std::vector<std::string> names;
    std::vector<std::vector<float>> arrays;

    const std::vector<float>& get(const std::string& name) const;
};
LoadedCheckpoint read_checkpoint(std::istream& is);

void save_checkpoint_file(const std::string& path, const std::string& meta_json,
                          const std::vector<NamedArray>& arrays);
LoadedCheckpoint load_checkpoint_file(const std::string& path);

// Worker count for batch-parallel sections: MASKDOOR_NUM_WORKERS when set,
// otherwise hardware concurrency capped at 8. Results are byte-reproducible
// for a fixed worker count.
int num_workers();

// Static split of [0,n) into per-worker ranges; fn(worker, begin, end).
// Reductions over worker outputs must run in worker order to stay
// deterministic.
void parallel_for(int n, int workers, const std::function<void(int, int, int)>& fn);

}  // namespace maskdoor::nn
