#include "maskdoor/detector.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

namespace maskdoor::det {

namespace {

constexpr double kLogClampLo = -6.0, kLogClampHi = 6.0;

double smooth_l1(double d) {
    double a = std::fabs(d);
    return a < 1.0 ? 0.5 * d * d : a - 0.5;
}

double smooth_l1_grad(double d) {
    if (d > 1.0) return 1.0;
    if (d < -1.0) return -1.0;
    return d;
}

}  // namespace

std::vector<float> class_distribution(const Detection& d) {
    std::vector<float> p = d.class_probs;
    double s = 0.0;
    for (float x : p) s += x;
    if (s <= 0.0) throw ValidationError("class_distribution: degenerate probabilities");
    for (float& x : p) x = float(x / s);
    return p;
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold) {
    std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
        return a.confidence > b.confidence;
    });
    std::vector<Detection> kept;
    for (auto& d : dets) {
        bool suppressed = false;
        for (const auto& k : kept) {
            if (k.box.class_id != d.box.class_id) continue;
            if (core::iou(k.box, d.box) > iou_threshold) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(std::move(d));
    }
    return kept;
}

TinyDet::TinyDet(const DetectorConfig& config, Rng& rng)
    : cfg(config),
      b1(3, 16, 3, 2, 1),
      b2(16, 32, 3, 2, 1),
      b3(32, 48, 3, 2, 1),
      b4(48, 48, 3, 1, 1),
      b5(48, 48, 3, 1, 1),
      cls_head(48, config.num_classes + 1, 1, 1, 0),
      box_head(48, 4, 1, 1, 0) {
    if (config.num_classes < 1) throw ValidationError("detector.num_classes must be >= 1");
    if (config.input_size % kStride != 0)
        throw ValidationError("detector.input_size must be divisible by 8");
    b1.init_he(rng);
    b2.init_he(rng);
    b3.init_he(rng);
    b4.init_he(rng);
    b5.init_he(rng);
    cls_head.init_he(rng, 0.1f);
    box_head.init_he(rng, 0.1f);
}

void TinyDet::forward(const Image& x, DetContext& ctx) const {
    if (x.c != 3) throw ValidationError("detector expects 3-channel images");
    if (x.h % kStride != 0 || x.w % kStride != 0)
        throw ValidationError("detector requires spatial dims divisible by 8");

    ctx.input = nn::Tensor(x.c, x.h, x.w);
    ctx.input.v = x.px;

    ctx.a1 = nn::conv2d_forward(b1, ctx.input, ctx.c1);
    nn::relu_(ctx.a1);
    ctx.a2 = nn::conv2d_forward(b2, ctx.a1, ctx.c2);
    nn::relu_(ctx.a2);
    ctx.a3 = nn::conv2d_forward(b3, ctx.a2, ctx.c3);
    nn::relu_(ctx.a3);
    ctx.a4 = nn::conv2d_forward(b4, ctx.a3, ctx.c4);
    nn::relu_(ctx.a4);
    ctx.a5 = nn::conv2d_forward(b5, ctx.a4, ctx.c5);
    nn::relu_(ctx.a5);
    ctx.cls_logits = nn::conv2d_forward(cls_head, ctx.a5, ctx.ccls);
    ctx.box_deltas = nn::conv2d_forward(box_head, ctx.a5, ctx.cbox);
}

LossParts TinyDet::loss_forward(const Image& x, const std::vector<CornerBox>& y,
                                DetContext& ctx) const {
    forward(x, ctx);
    const int K = cfg.num_classes;
    const int gh = ctx.cls_logits.h, gw = ctx.cls_logits.w;
    const int cells = gh * gw;

    // Each ground-truth box supervises the cell holding its center; when two
    // share a cell the larger box wins.
    ctx.cell_target.assign(size_t(cells), K);
    ctx.box_targets.assign(size_t(4) * cells, 0.0f);
    std::vector<double> owner_area(size_t(cells), -1.0);
    for (const auto& b : y) {
        if (b.class_id < 0 || b.class_id >= K)
            throw ValidationError("loss: box class out of range");
        core::CenterBox cb = core::corner_to_center(b);
        int ci = std::clamp(int(cb.cy / kStride), 0, gh - 1);
        int cj = std::clamp(int(cb.cx / kStride), 0, gw - 1);
        int cell = ci * gw + cj;
        if (b.area() <= owner_area[size_t(cell)]) continue;
        owner_area[size_t(cell)] = b.area();
        ctx.cell_target[size_t(cell)] = b.class_id;
        double acx = (cj + 0.5) * kStride, acy = (ci + 0.5) * kStride;
        double aw = cfg.anchor_size, ah = cfg.anchor_size;
        ctx.box_targets[size_t(0) * cells + cell] = float((cb.cx - acx) / aw);
        ctx.box_targets[size_t(1) * cells + cell] = float((cb.cy - acy) / ah);
        ctx.box_targets[size_t(2) * cells + cell] = float(std::log(cb.w / aw));
        ctx.box_targets[size_t(3) * cells + cell] = float(std::log(cb.h / ah));
    }

    // Per-cell softmax; positive and negative CE are normalized separately so
    // a handful of objects is not drowned out by background cells.
    ctx.probs = nn::Tensor(K + 1, gh, gw);
    int n_pos = 0;
    double ce_pos = 0.0, ce_neg = 0.0, loc = 0.0;
    for (int cell = 0; cell < cells; ++cell) {
        float mx = ctx.cls_logits.v[size_t(cell)];
        for (int c = 1; c <= K; ++c)
            mx = std::max(mx, ctx.cls_logits.v[size_t(c) * cells + cell]);
        double denom = 0.0;
        for (int c = 0; c <= K; ++c)
            denom += std::exp(double(ctx.cls_logits.v[size_t(c) * cells + cell] - mx));
        int target = ctx.cell_target[size_t(cell)];
        for (int c = 0; c <= K; ++c) {
            double p = std::exp(double(ctx.cls_logits.v[size_t(c) * cells + cell] - mx)) / denom;
            ctx.probs.v[size_t(c) * cells + cell] = float(p);
        }
        double pt = ctx.probs.v[size_t(target) * cells + cell];
        double ce = -std::log(std::max(pt, 1e-12));
        if (target == K) {
            ce_neg += ce;
        } else {
            ce_pos += ce;
            ++n_pos;
            for (int d = 0; d < 4; ++d) {
                double diff = double(ctx.box_deltas.v[size_t(d) * cells + cell]) -
                              double(ctx.box_targets[size_t(d) * cells + cell]);
                loc += smooth_l1(diff);
            }
        }
    }
    int n_neg = cells - n_pos;
    LossParts parts;
    parts.cls = ce_neg / std::max(1, n_neg) + ce_pos / std::max(1, n_pos);
    parts.loc = cfg.loc_weight * loc / std::max(1, n_pos);
    parts.total = parts.cls + parts.loc;
    ctx.parts = parts;
    return parts;
}

void TinyDet::loss_backward(const DetContext& ctx, DetGrads& grads, float upstream,
                            float param_scale, nn::Tensor* gx) const {
    const int K = cfg.num_classes;
    const int gh = ctx.cls_logits.h, gw = ctx.cls_logits.w;
    const int cells = gh * gw;

    int n_pos = 0;
    for (int cell = 0; cell < cells; ++cell)
        if (ctx.cell_target[size_t(cell)] != K) ++n_pos;
    int n_neg = cells - n_pos;
    float wp = upstream / float(std::max(1, n_pos));
    float wn = upstream / float(std::max(1, n_neg));

    nn::Tensor gcls(K + 1, gh, gw);
    nn::Tensor gbox(4, gh, gw);
    for (int cell = 0; cell < cells; ++cell) {
        int target = ctx.cell_target[size_t(cell)];
        float wcell = target == K ? wn : wp;
        for (int c = 0; c <= K; ++c) {
            float g = ctx.probs.v[size_t(c) * cells + cell] - (c == target ? 1.0f : 0.0f);
            gcls.v[size_t(c) * cells + cell] = wcell * g;
        }
        if (target != K) {
            for (int d = 0; d < 4; ++d) {
                double diff = double(ctx.box_deltas.v[size_t(d) * cells + cell]) -
                              double(ctx.box_targets[size_t(d) * cells + cell]);
                gbox.v[size_t(d) * cells + cell] =
                    float(cfg.loc_weight * smooth_l1_grad(diff)) * wp;
            }
        }
    }

    nn::Tensor ga5(ctx.a5.c, ctx.a5.h, ctx.a5.w);
    nn::conv2d_backward(cls_head, ctx.ccls, gcls, grads.cls, param_scale, &ga5);
    nn::conv2d_backward(box_head, ctx.cbox, gbox, grads.box, param_scale, &ga5);
    nn::relu_backward_(ctx.a5, ga5);

    nn::Tensor ga4(ctx.a4.c, ctx.a4.h, ctx.a4.w);
    nn::conv2d_backward(b5, ctx.c5, ga5, grads.b5, param_scale, &ga4);
    nn::relu_backward_(ctx.a4, ga4);

    nn::Tensor ga3(ctx.a3.c, ctx.a3.h, ctx.a3.w);
    nn::conv2d_backward(b4, ctx.c4, ga4, grads.b4, param_scale, &ga3);
    nn::relu_backward_(ctx.a3, ga3);

    nn::Tensor ga2(ctx.a2.c, ctx.a2.h, ctx.a2.w);
    nn::conv2d_backward(b3, ctx.c3, ga3, grads.b3, param_scale, &ga2);
    nn::relu_backward_(ctx.a2, ga2);

    nn::Tensor ga1(ctx.a1.c, ctx.a1.h, ctx.a1.w);
    nn::conv2d_backward(b2, ctx.c2, ga2, grads.b2, param_scale, &ga1);
    nn::relu_backward_(ctx.a1, ga1);

    nn::conv2d_backward(b1, ctx.c1, ga1, grads.b1, param_scale, gx);
}

LossParts TinyDet::loss(const Image& x, const std::vector<CornerBox>& y) const {
    DetContext ctx;
    return loss_forward(x, y, ctx);
}

std::vector<Detection> TinyDet::predict(const Image& x, double conf_threshold) const {
    DetContext ctx;
    forward(x, ctx);
    const int K = cfg.num_classes;
    const int gh = ctx.cls_logits.h, gw = ctx.cls_logits.w;
    const int cells = gh * gw;

    std::vector<Detection> cand;
    for (int cell = 0; cell < cells; ++cell) {
        float mx = ctx.cls_logits.v[size_t(cell)];
        for (int c = 1; c <= K; ++c)
            mx = std::max(mx, ctx.cls_logits.v[size_t(c) * cells + cell]);
        double denom = 0.0;
        for (int c = 0; c <= K; ++c)
            denom += std::exp(double(ctx.cls_logits.v[size_t(c) * cells + cell] - mx));
        std::vector<float> probs(size_t(K) + 1);
        for (int c = 0; c <= K; ++c)
            probs[size_t(c)] = float(
                std::exp(double(ctx.cls_logits.v[size_t(c) * cells + cell] - mx)) / denom);

        double conf;
        if (cfg.conf_mode == ConfidenceMode::OneMinusBackground) {
            conf = 1.0 - double(probs[size_t(K)]);
        } else {
            conf = 0.0;
            for (int c = 0; c < K; ++c) conf = std::max(conf, double(probs[size_t(c)]));
        }
        if (conf < conf_threshold) continue;

        int best = 0;
        for (int c = 1; c < K; ++c)
            if (probs[size_t(c)] > probs[size_t(best)]) best = c;

        int ci = cell / gw, cj = cell % gw;
        double acx = (cj + 0.5) * kStride, acy = (ci + 0.5) * kStride;
        double aw = cfg.anchor_size, ah = cfg.anchor_size;
        double tx = ctx.box_deltas.v[size_t(0) * cells + cell];
        double ty = ctx.box_deltas.v[size_t(1) * cells + cell];
        double tw = std::clamp(double(ctx.box_deltas.v[size_t(2) * cells + cell]),
                               kLogClampLo, kLogClampHi);
        double th = std::clamp(double(ctx.box_deltas.v[size_t(3) * cells + cell]),
                               kLogClampLo, kLogClampHi);
        double bcx = acx + tx * aw, bcy = acy + ty * ah;
        double bw = aw * std::exp(tw), bh = ah * std::exp(th);

        CornerBox box{best, bcx - bw / 2, bcy - bh / 2, bcx + bw / 2, bcy + bh / 2};
        box.x_min = std::clamp(box.x_min, 0.0, double(x.w));
        box.x_max = std::clamp(box.x_max, 0.0, double(x.w));
        box.y_min = std::clamp(box.y_min, 0.0, double(x.h));
        box.y_max = std::clamp(box.y_max, 0.0, double(x.h));
        if (box.x_max <= box.x_min || box.y_max <= box.y_min) continue;

        cand.push_back(Detection{box, conf, std::move(probs)});
    }
    return nms(std::move(cand), cfg.nms_iou);
}

GradCamPair TinyDet::gradcam_pass(const Image& x, int target_class, int layer,
                                  float scale) const {
    if (layer < 1 || layer > 5)
        throw std::invalid_argument("gradcam: unknown layer id " + std::to_string(layer) +
                                    " (expected 1..5)");
    if (target_class < 0 || target_class > cfg.num_classes)
        throw std::invalid_argument("gradcam: target class out of range");
    DetContext ctx;
    forward(x, ctx);
    const int cells = ctx.cls_logits.h * ctx.cls_logits.w;

    // Score = sum of the target-class logit over all cells.
    nn::Tensor gcls(ctx.cls_logits.c, ctx.cls_logits.h, ctx.cls_logits.w);
    for (int cell = 0; cell < cells; ++cell)
        gcls.v[size_t(target_class) * cells + cell] = scale;

    DetGrads sink;
    sink.match(*this);
    const nn::Tensor* acts[5] = {&ctx.a1, &ctx.a2, &ctx.a3, &ctx.a4, &ctx.a5};
    const std::vector<float>* cols[5] = {&ctx.c1, &ctx.c2, &ctx.c3, &ctx.c4, &ctx.c5};
    const nn::Conv2d* convs[5] = {&b1, &b2, &b3, &b4, &b5};

    nn::Tensor g(ctx.a5.c, ctx.a5.h, ctx.a5.w);
    nn::conv2d_backward(cls_head, ctx.ccls, gcls, sink.cls, 0.0f, &g);
    nn::relu_backward_(ctx.a5, g);
    for (int l = 5; l > layer; --l) {
        const nn::Tensor& below = *acts[l - 2];
        nn::Tensor gnext(below.c, below.h, below.w);
        nn::conv2d_backward(*convs[l - 1], *cols[l - 1], g, sink.b1, 0.0f, &gnext);
        nn::relu_backward_(below, gnext);
        g = std::move(gnext);
    }
    return GradCamPair{*acts[layer - 1], std::move(g)};
}

void DetGrads::match(const TinyDet& m) {
    b1.match(m.b1.weight.size(), m.b1.bias.size());
    b2.match(m.b2.weight.size(), m.b2.bias.size());
    b3.match(m.b3.weight.size(), m.b3.bias.size());
    b4.match(m.b4.weight.size(), m.b4.bias.size());
    b5.match(m.b5.weight.size(), m.b5.bias.size());
    cls.match(m.cls_head.weight.size(), m.cls_head.bias.size());
    box.match(m.box_head.weight.size(), m.box_head.bias.size());
}

void DetGrads::zero() {
    b1.zero(); b2.zero(); b3.zero(); b4.zero(); b5.zero();
    cls.zero(); box.zero();
}

void DetGrads::add(const DetGrads& o) {
    b1.add(o.b1); b2.add(o.b2); b3.add(o.b3); b4.add(o.b4); b5.add(o.b5);
    cls.add(o.cls); box.add(o.box);
}

std::vector<nn::ParamRef> TinyDet::parameters() {
    std::vector<nn::ParamRef> out;
    for (nn::Conv2d* l : {&b1, &b2, &b3, &b4, &b5, &cls_head, &box_head}) {
        out.push_back({l->weight.data(), l->weight.size()});
        out.push_back({l->bias.data(), l->bias.size()});
    }
    return out;
}

std::vector<const float*> TinyDet::grad_ptrs(const DetGrads& g) const {
    std::vector<const float*> out;
    for (const nn::ConvGrad* c : {&g.b1, &g.b2, &g.b3, &g.b4, &g.b5, &g.cls, &g.box}) {
        out.push_back(c->weight.data());
        out.push_back(c->bias.data());
    }
    return out;
}

void TinyDet::save(const std::string& path) const {
    nlohmann::ordered_json meta;
    meta["model"] = "tinydet";
    meta["version"] = 1;
    meta["num_classes"] = cfg.num_classes;
    meta["input_size"] = cfg.input_size;
    meta["anchor_size"] = cfg.anchor_size;
    meta["nms_iou"] = cfg.nms_iou;
    meta["loc_weight"] = cfg.loc_weight;
    meta["conf_mode"] =
        cfg.conf_mode == ConfidenceMode::OneMinusBackground ? "one_minus_bg" : "max_fg";
    std::vector<nn::NamedArray> arrays;
    const char* names[7] = {"b1", "b2", "b3", "b4", "b5", "cls", "box"};
    const nn::Conv2d* layers[7] = {&b1, &b2, &b3, &b4, &b5, &cls_head, &box_head};
    for (int i = 0; i < 7; ++i) {
        arrays.push_back({std::string(names[i]) + ".w", layers[i]->weight.data(),
                          layers[i]->weight.size()});
        arrays.push_back({std::string(names[i]) + ".b", layers[i]->bias.data(),
                          layers[i]->bias.size()});
    }
    nn::save_checkpoint_file(path, meta.dump(), arrays);
}

TinyDet TinyDet::load(const std::string& path) {
    auto ck = nn::load_checkpoint_file(path);
    auto meta = nlohmann::json::parse(ck.meta_json);
    if (meta.value("model", "") != "tinydet")
        throw std::runtime_error("checkpoint is not a tinydet model: " + path);

    TinyDet m;
    m.cfg.num_classes = meta.at("num_classes").get<int>();
    m.cfg.input_size = meta.at("input_size").get<int>();
    m.cfg.anchor_size = meta.at("anchor_size").get<double>();
    m.cfg.nms_iou = meta.at("nms_iou").get<double>();
    m.cfg.loc_weight = meta.at("loc_weight").get<double>();
    m.cfg.conf_mode = meta.value("conf_mode", "one_minus_bg") == std::string("max_fg")
                          ? ConfidenceMode::MaxForeground
                          : ConfidenceMode::OneMinusBackground;
    int K = m.cfg.num_classes;
    m.b1 = nn::Conv2d(3, 16, 3, 2, 1);
    m.b2 = nn::Conv2d(16, 32, 3, 2, 1);
    m.b3 = nn::Conv2d(32, 48, 3, 2, 1);
    m.b4 = nn::Conv2d(48, 48, 3, 1, 1);
    m.b5 = nn::Conv2d(48, 48, 3, 1, 1);
    m.cls_head = nn::Conv2d(48, K + 1, 1, 1, 0);
    m.box_head = nn::Conv2d(48, 4, 1, 1, 0);

    nn::Conv2d* layers[7] = {&m.b1, &m.b2, &m.b3, &m.b4, &m.b5, &m.cls_head, &m.box_head};
    const char* names[7] = {"b1", "b2", "b3", "b4", "b5", "cls", "box"};
    for (int i = 0; i < 7; ++i) {
        const auto& w = ck.get(std::string(names[i]) + ".w");
        const auto& b = ck.get(std::string(names[i]) + ".b");
        if (w.size() != layers[i]->weight.size() || b.size() != layers[i]->bias.size())
            throw std::runtime_error("checkpoint array size mismatch: " +
                                     std::string(names[i]));
        layers[i]->weight = w;
        layers[i]->bias = b;
    }
    return m;
}

}  // namespace maskdoor::det
