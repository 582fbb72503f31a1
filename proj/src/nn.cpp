#include "maskdoor/nn.hpp"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>
#include <thread>

namespace maskdoor::nn {

void gemm_nn(float* C, const float* A, const float* B, int M, int N, int K, float scale) {
    for (int i = 0; i < M; ++i) {
        const float* a_row = A + size_t(i) * K;
        float* c_row = C + size_t(i) * N;
        for (int k = 0; k < K; ++k) {
            float a = scale * a_row[k];
            if (a == 0.0f) continue;
            const float* b_row = B + size_t(k) * N;
            for (int j = 0; j < N; ++j) c_row[j] += a * b_row[j];
        }
    }
}

void gemm_nt(float* C, const float* A, const float* B, int M, int N, int K, float scale) {
    // Dot products with 16 fixed partial-sum lanes: vectorizable without
    // float reassociation, summation order independent of the platform.
    constexpr int L = 16;
    for (int i = 0; i < M; ++i) {
        const float* a_row = A + size_t(i) * K;
        float* c_row = C + size_t(i) * N;
        for (int j = 0; j < N; ++j) {
            const float* b_row = B + size_t(j) * K;
            float lanes[L] = {0};
            int k = 0;
            for (; k + L <= K; k += L)
                for (int l = 0; l < L; ++l) lanes[l] += a_row[k + l] * b_row[k + l];
            float acc = 0.0f;
            for (; k < K; ++k) acc += a_row[k] * b_row[k];
            for (int l = 0; l < L; ++l) acc += lanes[l];
            c_row[j] += scale * acc;
        }
    }
}

void gemm_tn(float* C, const float* A, const float* B, int M, int N, int K, float scale) {
    for (int k = 0; k < K; ++k) {
        const float* a_row = A + size_t(k) * M;
        const float* b_row = B + size_t(k) * N;
        for (int i = 0; i < M; ++i) {
            float a = scale * a_row[i];
            if (a == 0.0f) continue;
            float* c_row = C + size_t(i) * N;
            for (int j = 0; j < N; ++j) c_row[j] += a * b_row[j];
        }
    }
}

void im2col(const Tensor& img, int k, int stride, int pad, int out_h, int out_w,
            std::vector<float>& cols) {
    const int n = out_h * out_w;
    cols.assign(size_t(img.c) * k * k * n, 0.0f);
    for (int c = 0; c < img.c; ++c) {
        const float* plane = img.v.data() + size_t(c) * img.h * img.w;
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                float* dst = cols.data() + (size_t(c) * k * k + size_t(ki) * k + kj) * n;
                for (int oi = 0; oi < out_h; ++oi) {
                    int ii = oi * stride - pad + ki;
                    if (ii < 0 || ii >= img.h) continue;
                    const float* src = plane + size_t(ii) * img.w;
                    float* drow = dst + size_t(oi) * out_w;
                    int jj0 = -pad + kj;
                    for (int oj = 0; oj < out_w; ++oj) {
                        int jj = oj * stride + jj0;
                        if (jj >= 0 && jj < img.w) drow[oj] = src[jj];
                    }
                }
            }
        }
    }
}

void col2im(const std::vector<float>& cols, int k, int stride, int pad,
            int out_h, int out_w, Tensor& img) {
    const int n = out_h * out_w;
    for (int c = 0; c < img.c; ++c) {
        float* plane = img.v.data() + size_t(c) * img.h * img.w;
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                const float* src = cols.data() + (size_t(c) * k * k + size_t(ki) * k + kj) * n;
                for (int oi = 0; oi < out_h; ++oi) {
                    int ii = oi * stride - pad + ki;
                    if (ii < 0 || ii >= img.h) continue;
                    float* drow = plane + size_t(ii) * img.w;
                    const float* srow = src + size_t(oi) * out_w;
                    int jj0 = -pad + kj;
                    for (int oj = 0; oj < out_w; ++oj) {
                        int jj = oj * stride + jj0;
                        if (jj >= 0 && jj < img.w) drow[jj] += srow[oj];
                    }
                }
            }
        }
    }
}

Conv2d::Conv2d(int in_c, int out_c, int kernel, int s, int p)
    : in_ch(in_c), out_ch(out_c), k(kernel), stride(s), pad(p),
      weight(size_t(out_c) * in_c * kernel * kernel, 0.0f), bias(out_c, 0.0f) {}

void Conv2d::init_he(Rng& rng, float gain) {
    double std = gain * std::sqrt(2.0 / (double(in_ch) * k * k));
    for (auto& w : weight) w = float(rng.normal() * std);
    std::fill(bias.begin(), bias.end(), 0.0f);
}

ConvTranspose2d::ConvTranspose2d(int in_c, int out_c, int kernel, int s, int p, int op)
    : in_ch(in_c), out_ch(out_c), k(kernel), stride(s), pad(p), output_pad(op),
      weight(size_t(in_c) * out_c * kernel * kernel, 0.0f), bias(out_c, 0.0f) {}

void ConvTranspose2d::init_he(Rng& rng, float gain) {
    double std = gain * std::sqrt(2.0 / (double(in_ch) * k * k));
    for (auto& w : weight) w = float(rng.normal() * std);
    std::fill(bias.begin(), bias.end(), 0.0f);
}

void ConvGrad::add(const ConvGrad& o) {
    for (size_t i = 0; i < weight.size(); ++i) weight[i] += o.weight[i];
    for (size_t i = 0; i < bias.size(); ++i) bias[i] += o.bias[i];
}

Tensor conv2d_forward(const Conv2d& l, const Tensor& x, std::vector<float>& cols) {
    if (x.c != l.in_ch) throw ValidationError("conv2d: channel mismatch");
    int oh = conv_out_dim(x.h, l.k, l.stride, l.pad);
    int ow = conv_out_dim(x.w, l.k, l.stride, l.pad);
    im2col(x, l.k, l.stride, l.pad, oh, ow, cols);
    Tensor y(l.out_ch, oh, ow);
    const int n = oh * ow;
    for (int oc = 0; oc < l.out_ch; ++oc)
        std::fill_n(y.v.data() + size_t(oc) * n, n, l.bias[oc]);
    gemm_nn(y.v.data(), l.weight.data(), cols.data(), l.out_ch, n,
            l.in_ch * l.k * l.k, 1.0f);
    return y;
}

void conv2d_backward(const Conv2d& l, const std::vector<float>& cols,
                     const Tensor& gy, ConvGrad& g, float param_scale, Tensor* gx) {
    const int n = gy.h * gy.w;
    const int kk = l.in_ch * l.k * l.k;
    if (param_scale != 0.0f) {
        gemm_nt(g.weight.data(), gy.v.data(), cols.data(), l.out_ch, kk, n, param_scale);
        for (int oc = 0; oc < l.out_ch; ++oc) {
            const float* row = gy.v.data() + size_t(oc) * n;
            float acc = 0.0f;
            for (int j = 0; j < n; ++j) acc += row[j];
            g.bias[oc] += param_scale * acc;
        }
    }
    if (gx) {
        std::vector<float> gcols(size_t(kk) * n, 0.0f);
        gemm_tn(gcols.data(), l.weight.data(), gy.v.data(), kk, n, l.out_ch, 1.0f);
        col2im(gcols, l.k, l.stride, l.pad, gy.h, gy.w, *gx);
    }
}

Tensor convt2d_forward(const ConvTranspose2d& l, const Tensor& x) {
    if (x.c != l.in_ch) throw ValidationError("convt2d: channel mismatch");
    int oh = (x.h - 1) * l.stride - 2 * l.pad + l.k + l.output_pad;
    int ow = (x.w - 1) * l.stride - 2 * l.pad + l.k + l.output_pad;
    Tensor y(l.out_ch, oh, ow);
    const int n = x.h * x.w;
    const int kk = l.out_ch * l.k * l.k;
    // cols over the *input* grid, scattered into the larger output.
    std::vector<float> cols(size_t(kk) * n, 0.0f);
    gemm_tn(cols.data(), l.weight.data(), x.v.data(), kk, n, l.in_ch, 1.0f);
    col2im(cols, l.k, l.stride, l.pad, x.h, x.w, y);
    for (int oc = 0; oc < l.out_ch; ++oc) {
        float* plane = y.v.data() + size_t(oc) * oh * ow;
        float b = l.bias[oc];
        for (int i = 0; i < oh * ow; ++i) plane[i] += b;
    }
    return y;
}

void convt2d_backward(const ConvTranspose2d& l, const Tensor& x, const Tensor& gy,
                      ConvGrad& g, float param_scale, Tensor* gx,
                      std::vector<float>& scratch) {
    const int n = x.h * x.w;
    const int kk = l.out_ch * l.k * l.k;
    im2col(gy, l.k, l.stride, l.pad, x.h, x.w, scratch);  // (kk) x (n)
    if (param_scale != 0.0f) {
        gemm_nt(g.weight.data(), x.v.data(), scratch.data(), l.in_ch, kk, n, param_scale);
        for (int oc = 0; oc < l.out_ch; ++oc) {
            const float* plane = gy.v.data() + size_t(oc) * gy.h * gy.w;
            float acc = 0.0f;
            for (int i = 0; i < gy.h * gy.w; ++i) acc += plane[i];
            g.bias[oc] += param_scale * acc;
        }
    }
    if (gx) gemm_nn(gx->v.data(), l.weight.data(), scratch.data(), l.in_ch, n, kk, 1.0f);
}

void relu_(Tensor& t) {
    for (auto& x : t.v) x = x > 0.0f ? x : 0.0f;
}
void relu_backward_(const Tensor& y, Tensor& gy) {
    for (size_t i = 0; i < y.v.size(); ++i)
        if (y.v[i] <= 0.0f) gy.v[i] = 0.0f;
}
void leaky_relu_(Tensor& t, float slope) {
    for (auto& x : t.v) x = x > 0.0f ? x : slope * x;
}
void leaky_relu_backward_(const Tensor& y, Tensor& gy, float slope) {
    for (size_t i = 0; i < y.v.size(); ++i)
        if (y.v[i] <= 0.0f) gy.v[i] *= slope;
}
void tanh_(Tensor& t) {
    for (auto& x : t.v) x = std::tanh(x);
}
void tanh_backward_(const Tensor& y, Tensor& gy) {
    for (size_t i = 0; i < y.v.size(); ++i) gy.v[i] *= 1.0f - y.v[i] * y.v[i];
}

void Adam::step(const std::vector<ParamRef>& params,
                const std::vector<const float*>& grads) {
    if (m_.empty()) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (size_t p = 0; p < params.size(); ++p) {
            m_[p].assign(params[p].n, 0.0f);
            v_[p].assign(params[p].n, 0.0f);
        }
    }
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, double(t_));
    double bc2 = 1.0 - std::pow(beta2_, double(t_));
    for (size_t p = 0; p < params.size(); ++p) {
        float* w = params[p].data;
        const float* gr = grads[p];
        float* m = m_[p].data();
        float* v = v_[p].data();
        for (size_t i = 0; i < params[p].n; ++i) {
            double g = gr[i];
            m[i] = float(beta1_ * m[i] + (1.0 - beta1_) * g);
            v[i] = float(beta2_ * v[i] + (1.0 - beta2_) * g * g);
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            w[i] -= float(lr_ * mhat / (std::sqrt(vhat) + eps_));
        }
    }
}

// --------------------------- checkpoint io --------------------------------

namespace {

constexpr uint32_t kCheckpointMagic = 0x4b43444dU;  // "MDCK"
constexpr uint32_t kCheckpointVersion = 1;

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint: truncated stream");
    return v;
}

}  // namespace

void write_checkpoint(std::ostream& os, const std::string& meta_json,
                      const std::vector<NamedArray>& arrays) {
    write_pod(os, kCheckpointMagic);
    write_pod(os, kCheckpointVersion);
    write_pod(os, uint64_t(meta_json.size()));
    os.write(meta_json.data(), std::streamsize(meta_json.size()));
    write_pod(os, uint32_t(arrays.size()));
    for (const auto& a : arrays) {
        write_pod(os, uint32_t(a.name.size()));
        os.write(a.name.data(), std::streamsize(a.name.size()));
        write_pod(os, uint64_t(a.n));
        os.write(reinterpret_cast<const char*>(a.data), std::streamsize(a.n * sizeof(float)));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed");
}

LoadedCheckpoint read_checkpoint(std::istream& is) {
    if (read_pod<uint32_t>(is) != kCheckpointMagic)
        throw std::runtime_error("checkpoint: bad magic (not a maskdoor checkpoint)");
    uint32_t version = read_pod<uint32_t>(is);
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    LoadedCheckpoint ck;
    uint64_t meta_len = read_pod<uint64_t>(is);
    ck.meta_json.resize(meta_len);
    is.read(ck.meta_json.data(), std::streamsize(meta_len));
    uint32_t count = read_pod<uint32_t>(is);
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t name_len = read_pod<uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        uint64_t n = read_pod<uint64_t>(is);
        std::vector<float> data(n);
        is.read(reinterpret_cast<char*>(data.data()), std::streamsize(n * sizeof(float)));
        if (!is) throw std::runtime_error("checkpoint: truncated array " + name);
        ck.names.push_back(std::move(name));
        ck.arrays.push_back(std::move(data));
    }
    return ck;
}

const std::vector<float>& LoadedCheckpoint::get(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return arrays[i];
    throw std::runtime_error("checkpoint: missing array " + name);
}

void save_checkpoint_file(const std::string& path, const std::string& meta_json,
                          const std::vector<NamedArray>& arrays) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    write_checkpoint(os, meta_json, arrays);
}

LoadedCheckpoint load_checkpoint_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    return read_checkpoint(is);
}

int num_workers() {
    if (const char* env = std::getenv("MASKDOOR_NUM_WORKERS")) {
        int n = std::atoi(env);
        if (n >= 1) return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    return int(hw > 8 ? 8 : hw);
}

void parallel_for(int n, int workers, const std::function<void(int, int, int)>& fn) {
    if (n <= 0) return;
    if (workers > n) workers = n;
    if (workers <= 1) {
        fn(0, 0, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(size_t(workers));
    int chunk = (n + workers - 1) / workers;
    for (int t = 0; t < workers; ++t) {
        int begin = t * chunk;
        int end = std::min(n, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back(fn, t, begin, end);
    }
    for (auto& th : pool) th.join();
}

}  // namespace maskdoor::nn
